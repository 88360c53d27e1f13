"""Small affine+ReLU image encoders with a linear projection head."""

from __future__ import annotations

import hashlib
import math

import numpy as np

from . import tensor as T
from .data import flatten_images


class AffineLayer:
    """One affine map held as two parameter tensors (w: in x out, b: out)."""

    def __init__(self, w: T.Tensor, b: T.Tensor):
        self.w = w
        self.b = b

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator,
             dtype=np.float32, requires_grad: bool = True) -> "AffineLayer":
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        b = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
        return cls(T.Tensor(w, requires_grad=requires_grad),
                   T.Tensor(b, requires_grad=requires_grad))

    def copy(self) -> "AffineLayer":
        return AffineLayer(T.Tensor(self.w.data.copy(), requires_grad=self.w.requires_grad),
                           T.Tensor(self.b.data.copy(), requires_grad=self.b.requires_grad))


class EncoderModel:
    """Feature extractor: flatten -> (affine, ReLU)* -> affine -> feature.

    The projection head is a single extra affine map used only by the
    contrastive losses; ``encode`` returns trunk features, which is what
    downstream heads and the watermark objectives consume.
    """

    def __init__(self, input_side: int, hidden_dims, feature_dim: int,
                 layers, proj: AffineLayer, channels: int = 3):
        self.input_side = int(input_side)
        self.channels = int(channels)
        self.hidden_dims = tuple(int(d) for d in hidden_dims)
        self.feature_dim = int(feature_dim)
        self.layers = list(layers)
        self.proj = proj
        self.meta: dict = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, input_side: int, hidden_dims=(256, 128), feature_dim: int = 32,
             rng: np.random.Generator | None = None, dtype=np.float32,
             requires_grad: bool = True, channels: int = 3) -> "EncoderModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [input_side * input_side * channels, *hidden_dims, feature_dim]
        layers = [AffineLayer.init(dims[i], dims[i + 1], rng, dtype, requires_grad)
                  for i in range(len(dims) - 1)]
        proj = AffineLayer.init(feature_dim, feature_dim, rng, dtype, requires_grad)
        return cls(input_side, hidden_dims, feature_dim, layers, proj, channels)

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.input_side, self.hidden_dims, self.feature_dim,
                            [l.copy() for l in self.layers], self.proj.copy(), self.channels)

    def frozen_copy(self) -> "EncoderModel":
        """Copy whose parameters never receive gradients (momentum encoder)."""
        out = self.copy()
        for p in out.params():
            p.requires_grad = False
        return out

    # -- forward ------------------------------------------------------------

    @property
    def input_dim(self) -> int:
        return self.input_side * self.input_side * self.channels

    def forward_batch(self, x, dropout_rate: float = 0.0,
                      rng: np.random.Generator | None = None,
                      project: bool = False) -> T.Tensor:
        """Differentiable forward pass on a (batch, input_dim) matrix.

        Dropout, when enabled, hits each hidden ReLU output; the final
        feature (and projection) stay deterministic.
        """
        h = x if isinstance(x, T.Tensor) else T.Tensor(x)
        if h.data.ndim != 2 or h.data.shape[1] != self.input_dim:
            raise ValueError(
                f"encoder expects (batch, {self.input_dim}) input, got {h.data.shape}")
        if dropout_rate > 0.0 and rng is None:
            raise ValueError("dropout requires an rng")
        for layer in self.layers[:-1]:
            h = T.relu(T.linear(h, layer.w, layer.b))
            if dropout_rate > 0.0:
                h = T.mul(h, T.dropout_mask(h.data.shape, dropout_rate, rng))
        last = self.layers[-1]
        h = T.linear(h, last.w, last.b)
        if project:
            h = T.linear(h, self.proj.w, self.proj.b)
        return h

    def encode(self, img: np.ndarray) -> np.ndarray:
        """Deterministic feature vector for one image (no dropout, no head)."""
        arr = np.asarray(img, dtype=np.float32)
        expect = (self.input_side, self.input_side, self.channels)
        if arr.shape != expect:
            raise ValueError(f"encoder expects image shape {expect}, got {arr.shape}")
        return self.forward_batch(flatten_images(arr)).data[0].copy()

    def encode_batch(self, images: np.ndarray) -> np.ndarray:
        return self.forward_batch(flatten_images(images)).data.copy()

    # -- parameters ----------------------------------------------------------

    def params(self) -> list[T.Tensor]:
        out: list[T.Tensor] = []
        for layer in self.layers:
            out.extend((layer.w, layer.b))
        out.extend((self.proj.w, self.proj.b))
        return out

    def trunk_params(self) -> list[T.Tensor]:
        out: list[T.Tensor] = []
        for layer in self.layers:
            out.extend((layer.w, layer.b))
        return out

    def named_params(self) -> list[tuple[str, T.Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"trunk.{i}.w", layer.w))
            out.append((f"trunk.{i}.b", layer.b))
        out.append(("proj.w", self.proj.w))
        out.append(("proj.b", self.proj.b))
        return out

    def prunable_weights(self) -> list[T.Tensor]:
        """Weight matrices subject to pruning; biases are exempt."""
        return [layer.w for layer in self.layers] + [self.proj.w]

    def architecture(self) -> dict:
        return {
            "input_side": self.input_side,
            "channels": self.channels,
            "hidden_dims": list(self.hidden_dims),
            "feature_dim": self.feature_dim,
        }

    def param_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_params():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype=np.float32).tobytes())
        return h.hexdigest()[:16]
