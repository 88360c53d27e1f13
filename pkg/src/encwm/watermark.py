"""Task-agnostic backdoor watermark embedding.

A frozen reference encoder provides target features; a trainable copy is
fine-tuned so that triggered inputs yield features anti-aligned with the
reference while clean inputs keep matching it.  Dropout on the copy's hidden
activations during embedding hardens the watermark against downstream
fine-tuning and pruning.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import LabeledDataset, TriggerSpec, apply_trigger_batch, flatten_images
from .encoder import EncoderModel

logger = logging.getLogger(__name__)


class EmbeddingDiverged(RuntimeError):
    """Raised when the embedding loss stops being finite."""

    def __init__(self, epoch: int, last_finite_epoch: int):
        super().__init__(
            f"non-finite loss at epoch {epoch}; last finite epoch was {last_finite_epoch}")
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch


@dataclass
class WatermarkConfig:
    trigger: TriggerSpec
    eta: float = 0.5
    epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 1e-3
    dropout: float = 0.2
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def hash(self) -> str:
        blob = {
            "trigger_id": self.trigger.trigger_id,
            "eta": self.eta,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "dropout": self.dropout,
            "optimizer": self.optimizer,
            "seed": self.seed,
        }
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class WatermarkedEncoder:
    """Fine-tuned encoder plus the provenance needed to audit it."""

    encoder: EncoderModel
    provenance: dict
    history: list = field(default_factory=list)  # per-epoch (uniqueness, preserving) means


def _mean_reference_cosine(reference: np.ndarray, feats: T.Tensor) -> T.Tensor:
    """Mean row-wise cosine between constant reference features and feats."""
    refn = reference.astype(np.float64)
    norms = np.sqrt((refn ** 2).sum(axis=1))
    safe = np.where(norms > T.NORM_EPS, norms, 1.0)
    refn = (refn / safe[:, None]).astype(np.result_type(feats.data.dtype, np.float32))
    refn[norms <= T.NORM_EPS] = 0.0
    fn = T.rows_normalize(feats)
    return T.mean(T.reduce_sum(T.mul(fn, T.Tensor(refn)), axis=1))


def uniqueness_loss(f: EncoderModel, f_prime: EncoderModel, batch: np.ndarray,
                    trig: TriggerSpec) -> T.Tensor:
    """Mean cosine between reference features of clean images and the
    trainable encoder's features of their triggered versions.

    Differentiable w.r.t. ``f_prime`` only; minimizing drives triggered
    features away from (ideally opposite to) the reference.
    """
    batch = np.asarray(batch, dtype=np.float32)
    if len(batch) == 0:
        raise ValueError("empty batch")
    reference = f.encode_batch(batch)
    triggered = apply_trigger_batch(batch, trig)
    feats = f_prime.forward_batch(flatten_images(triggered))
    return _mean_reference_cosine(reference, feats)


def preservation_loss(f: EncoderModel, f_prime: EncoderModel, batch: np.ndarray) -> T.Tensor:
    """Negative mean cosine between reference and trainable features on
    clean images; minimizing keeps the two encoders functionally aligned."""
    batch = np.asarray(batch, dtype=np.float32)
    if len(batch) == 0:
        raise ValueError("empty batch")
    reference = f.encode_batch(batch)
    feats = f_prime.forward_batch(flatten_images(batch))
    return T.neg(_mean_reference_cosine(reference, feats))


def embed_watermark(f: EncoderModel, dataset: LabeledDataset,
                    cfg: WatermarkConfig) -> WatermarkedEncoder:
    """Fine-tune a copy of ``f`` under uniqueness + eta * preservation.

    ``f`` itself is never touched: it is deep-copied and then serves only as
    the frozen feature reference.  With ``epochs == 0`` the returned encoder
    is a bit-exact copy of ``f``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    f_prime = f.copy()
    # the projection head plays no role in either loss; only the trunk moves
    params = f_prime.trunk_params()
    opt = T.Adam(cfg.learning_rate) if cfg.optimizer == "adam" else T.SGD(cfg.learning_rate)
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_rng, drop_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    images = dataset.images
    n = len(images)
    history: list[tuple[float, float]] = []

    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        lu_sum = lp_sum = 0.0
        steps = 0
        for start in range(0, n, cfg.batch_size):
            batch = images[perm[start:start + cfg.batch_size]]
            reference = f.encode_batch(batch)
            triggered = apply_trigger_batch(batch, cfg.trigger)
            feats_t = f_prime.forward_batch(flatten_images(triggered),
                                            dropout_rate=cfg.dropout, rng=drop_rng)
            feats_c = f_prime.forward_batch(flatten_images(batch),
                                            dropout_rate=cfg.dropout, rng=drop_rng)
            l_u = _mean_reference_cosine(reference, feats_t)
            l_p = T.neg(_mean_reference_cosine(reference, feats_c))
            loss = T.add(l_u, T.scale(l_p, cfg.eta))
            if not np.isfinite(loss.data):
                raise EmbeddingDiverged(epoch, epoch - 1)
            T.zero_grads(params)
            loss.backward()
            opt.step(params)
            lu_sum += l_u.item()
            lp_sum += l_p.item()
            steps += 1
        history.append((lu_sum / steps, lp_sum / steps))
        logger.info("embed epoch %d/%d uniqueness %.4f preserving %.4f",
                    epoch + 1, cfg.epochs, history[-1][0], history[-1][1])

    if history:
        logger.info("embed final uniqueness %.4f preserving %.4f", *history[-1])
    provenance = {
        "source_model": f.param_digest(),
        "trigger_id": cfg.trigger.trigger_id,
        "trigger_kind": cfg.trigger.kind,
        "config_hash": cfg.hash(),
    }
    return WatermarkedEncoder(encoder=f_prime, provenance=provenance, history=history)
