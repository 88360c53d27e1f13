"""Downstream classifiers on frozen encoders, plus the plagiarist's attacks:
fine-tuning (retrain-last-layers, fine-tune-all-layers) and weight pruning
(random or smallest-L1-magnitude, per layer, biases exempt).

Attacks always operate on a copy; the attacked model is never mutated.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import LabeledDataset, flatten_images
from .encoder import AffineLayer, EncoderModel

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("FTAL", "RTLL", "prune_random", "prune_l1")

DEFAULT_HEAD_EPOCHS = 60
DEFAULT_HEAD_LR = 0.2
# attackers fine-tune gently (10x below head training) to keep the model usable
DEFAULT_FTAL_LR = DEFAULT_HEAD_LR / 10
DEFAULT_FTAL_EPOCHS = 15


@dataclass
class AttackConfig:
    kind: str
    epochs: int | None = None
    learning_rate: float | None = None
    ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"kind must be one of {ATTACK_KINDS}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("pruning ratio must lie in [0, 1]")


class Classifier:
    """Frozen-or-not encoder plus an affine head over its features."""

    def __init__(self, encoder: EncoderModel, head: AffineLayer, classes: int,
                 provenance: dict | None = None):
        self.encoder = encoder
        self.head = head
        self.classes = int(classes)
        self.provenance = dict(provenance or {})

    def copy(self) -> "Classifier":
        return Classifier(self.encoder.copy(), self.head.copy(), self.classes,
                          dict(self.provenance))

    def logits(self, images: np.ndarray) -> np.ndarray:
        feats = self.encoder.encode_batch(images)
        return feats @ self.head.w.data + self.head.b.data

    def predict(self, img: np.ndarray) -> int:
        """Class id with the highest logit; ties go to the lowest id."""
        return int(np.argmax(self.logits(np.asarray(img, dtype=np.float32)[None])[0]))

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(images), axis=1)

    def named_params(self):
        out = list(self.encoder.named_params())
        out.append(("head.w", self.head.w))
        out.append(("head.b", self.head.b))
        return out

    def prunable_weights(self) -> list[T.Tensor]:
        """Trunk and head weight matrices (the layers the downstream model
        actually runs); biases and the unused projection head are exempt."""
        return [layer.w for layer in self.encoder.layers] + [self.head.w]

    def param_digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, p in self.named_params():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype=np.float32).tobytes())
        return h.hexdigest()[:16]


def softmax_cross_entropy(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    n, c = logits.data.shape
    row_max = logits.data.max(axis=1, keepdims=True)
    shifted = T.add(logits, T.Tensor(-row_max.astype(logits.data.dtype)))
    one_hot = np.zeros((n, c), dtype=logits.data.dtype)
    one_hot[np.arange(n), labels] = 1.0
    lse = T.log(T.reduce_sum(T.exp(shifted), axis=1))
    pos = T.reduce_sum(T.mul(shifted, T.Tensor(one_hot)), axis=1)
    return T.mean(T.sub(lse, pos))


def _fit_head(features: np.ndarray, labels: np.ndarray, classes: int,
              epochs: int, lr: float, rng: np.random.Generator) -> AffineLayer:
    head = AffineLayer.init(features.shape[1], classes, rng)
    opt = T.SGD(lr)
    params = [head.w, head.b]
    n = len(features)
    batch = min(64, n)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            logits = T.linear(T.Tensor(features[idx]), head.w, head.b)
            loss = softmax_cross_entropy(logits, labels[idx])
            T.zero_grads(params)
            loss.backward()
            opt.step(params)
    return head


def train_head(encoder: EncoderModel, labeled: LabeledDataset,
               epochs: int = DEFAULT_HEAD_EPOCHS, lr: float = DEFAULT_HEAD_LR,
               seed: int = 0) -> Classifier:
    """Softmax-regression head on frozen encoder features.

    The encoder is only read (features are precomputed) and stays bit-exact.
    """
    if len(labeled) == 0:
        raise ValueError("labeled dataset is empty")
    rng = np.random.default_rng(seed)
    features = encoder.encode_batch(labeled.images)
    head = _fit_head(features, labeled.labels, labeled.class_count, epochs, lr, rng)
    return Classifier(encoder, head, labeled.class_count,
                      provenance={"encoder": encoder.param_digest(), "head_seed": seed})


def finetune(clf: Classifier, cfg: AttackConfig, labeled: LabeledDataset) -> Classifier:
    """Attacker post-processing on an owned copy of the classifier.

    RTLL re-initializes and retrains the head with the encoder frozen;
    FTAL updates head and encoder trunk jointly at a gentler learning rate.
    """
    if cfg.kind not in ("FTAL", "RTLL"):
        raise ValueError(f"finetune expects kind FTAL or RTLL, got {cfg.kind!r}")
    if len(labeled) == 0:
        raise ValueError("labeled dataset is empty")
    if labeled.class_count != clf.classes:
        raise ValueError("label space does not match the classifier head")
    out = clf.copy()
    rng = np.random.default_rng(cfg.seed)
    if cfg.kind == "RTLL":
        epochs = cfg.epochs if cfg.epochs is not None else DEFAULT_HEAD_EPOCHS
        lr = cfg.learning_rate if cfg.learning_rate is not None else DEFAULT_HEAD_LR
        features = out.encoder.encode_batch(labeled.images)
        out.head = _fit_head(features, labeled.labels, clf.classes, epochs, lr, rng)
    else:
        epochs = cfg.epochs if cfg.epochs is not None else DEFAULT_FTAL_EPOCHS
        lr = cfg.learning_rate if cfg.learning_rate is not None else DEFAULT_FTAL_LR
        params = out.encoder.trunk_params() + [out.head.w, out.head.b]
        opt = T.SGD(lr)
        n = len(labeled)
        batch = min(64, n)
        flat = flatten_images(labeled.images)
        for _ in range(epochs):
            perm = rng.permutation(n)
            for start in range(0, n, batch):
                idx = perm[start:start + batch]
                feats = out.encoder.forward_batch(flat[idx])
                logits = T.linear(feats, out.head.w, out.head.b)
                loss = softmax_cross_entropy(logits, labeled.labels[idx])
                T.zero_grads(params)
                loss.backward()
                opt.step(params)
    out.provenance["attack"] = cfg.kind
    return out


def prune(model, ratio: float, method: str = "l1", seed: int | None = None):
    """Zero floor(ratio * n) weights in every prunable layer of a copy.

    ``l1`` removes the smallest magnitudes (ties broken by index order);
    ``random`` removes a uniform sample.  Works on anything exposing
    ``copy()`` and ``prunable_weights()`` (encoders and classifiers).
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("pruning ratio must lie in [0, 1]")
    if method not in ("l1", "random"):
        raise ValueError(f"method must be 'l1' or 'random', got {method!r}")
    out = model.copy()
    rng = np.random.default_rng(seed)
    for w in out.prunable_weights():
        flat = w.data.reshape(-1)
        k = int(math.floor(ratio * flat.size + 1e-9))
        if k == 0:
            continue
        if method == "l1":
            idx = np.argsort(np.abs(flat), kind="stable")[:k]
        else:
            idx = rng.choice(flat.size, size=k, replace=False)
        flat[idx] = 0.0
    if hasattr(out, "provenance"):
        out.provenance["attack"] = f"prune_{method}_{ratio}"
    return out
