"""Contrastive pre-training of clean encoders.

Two algorithms: an in-batch normalized-temperature cross-entropy over paired
augmented views, and a queue-based variant with a momentum-updated key
encoder whose parameters never receive gradients.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import AugmentConfig, LabeledDataset, augment, flatten_images
from .encoder import EncoderModel

logger = logging.getLogger(__name__)

ALGORITHMS = ("simclr", "moco")


@dataclass
class PretrainConfig:
    algorithm: str = "simclr"
    batch_size: int = 64
    epochs: int = 60
    temperature: float = 0.5
    momentum: float = 0.99
    queue_capacity: int = 512
    learning_rate: float = 1e-3
    feature_dim: int = 32
    hidden_dims: tuple = (256, 128)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.algorithm == "moco" and self.queue_capacity % self.batch_size != 0:
            raise ValueError("queue_capacity must be a multiple of batch_size")


class MomentumQueue:
    """Fixed-capacity FIFO of unit key feature vectors."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._rows: deque[np.ndarray] = deque()

    def __len__(self) -> int:
        return len(self._rows)

    def push(self, keys: np.ndarray) -> int:
        """Append a batch of key vectors, evicting the oldest past capacity.

        Returns the number of evicted entries: max(0, size + batch - K).
        """
        keys = np.asarray(keys, dtype=np.float32)
        if keys.ndim == 1:
            keys = keys[None]
        if len(keys) > self.capacity:
            raise ValueError(f"batch of {len(keys)} exceeds queue capacity {self.capacity}")
        evicted = max(0, len(self._rows) + len(keys) - self.capacity)
        for row in keys:
            self._rows.append(row.copy())
        for _ in range(evicted):
            self._rows.popleft()
        return evicted

    def contents(self) -> np.ndarray:
        """Stored vectors, oldest first, as a (size, dim) matrix."""
        if not self._rows:
            raise ValueError("queue is empty")
        return np.stack(self._rows)


def ntxent_loss(features, temperature: float) -> T.Tensor:
    """Temperature-scaled contrastive loss over 2N view-paired features.

    ``features`` is a (2N, d) tensor whose rows 2t and 2t+1 are the two
    augmented views of sample t.  For each row the positive is its partner;
    the denominator runs over every other row (self excluded).  The result
    is the mean over all 2N ordered pairs.  Cosine similarity makes the loss
    invariant to any positive rescaling of the features.
    """
    feats = features if isinstance(features, T.Tensor) else T.Tensor(features)
    if feats.data.ndim != 2:
        raise ValueError("ntxent_loss expects a (2N, d) feature matrix")
    n2 = feats.data.shape[0]
    if n2 < 2 or n2 % 2 != 0:
        raise ValueError(f"ntxent_loss needs an even feature count >= 2, got {n2}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")

    zn = T.rows_normalize(feats)
    logits = T.scale(T.matmul(zn, T.transpose(zn)), 1.0 / temperature)

    partner = np.arange(n2) ^ 1  # 0<->1, 2<->3, ...
    excl = np.ones((n2, n2), dtype=feats.data.dtype)
    np.fill_diagonal(excl, 0.0)
    pos_mask = np.zeros((n2, n2), dtype=feats.data.dtype)
    pos_mask[np.arange(n2), partner] = 1.0

    # Shift each row by its max over the allowed (k != i) entries.  The
    # shift is a constant, so gradients are untouched, overflow is ruled
    # out, and the one-pair case lands on an exact zero.
    vals = logits.data.copy()
    np.fill_diagonal(vals, -np.inf)
    row_max = vals.max(axis=1)
    shifted = T.add(logits, T.Tensor(-row_max[:, None].astype(feats.data.dtype)))
    # Excluded entries get a huge negative offset so exp underflows to 0.
    shifted = T.add(shifted, T.Tensor(((excl - 1.0) * 1e4).astype(feats.data.dtype)))
    denom = T.reduce_sum(T.exp(shifted), axis=1)
    pos = T.reduce_sum(T.mul(shifted, T.Tensor(pos_mask)), axis=1)
    return T.mean(T.sub(T.log(denom), pos))


def moco_loss(q, k_plus, queue: MomentumQueue, temperature: float) -> T.Tensor:
    """Cross-entropy of the positive key against the queued negatives.

    ``q`` and ``k_plus`` are unit feature vectors; the denominator sums
    exp(q.k/t) over the positive plus every stored negative.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if len(queue) == 0:
        raise ValueError("queue is empty; push at least one key batch first")
    qt = q if isinstance(q, T.Tensor) else T.Tensor(q)
    kt = k_plus if isinstance(k_plus, T.Tensor) else T.Tensor(k_plus)
    if qt.data.ndim != 1 or qt.data.shape != kt.data.shape:
        raise ValueError("q and k_plus must be equal-length vectors")
    negatives = queue.contents().astype(qt.data.dtype)

    pos = T.scale(T.reduce_sum(T.mul(qt, kt)), 1.0 / temperature)
    neg = T.scale(T.matmul(T.Tensor(negatives), qt), 1.0 / temperature)
    logits = T.concat([_as_1d(pos), neg])
    c = float(logits.data.max())
    shifted = T.add(logits, T.Tensor(np.asarray(-c, dtype=qt.data.dtype)))
    lse = T.log(T.reduce_sum(T.exp(shifted)))
    first = T.reduce_sum(T.mul(shifted, T.Tensor(_one_hot0(logits.data.shape[0], qt.data.dtype))))
    return T.sub(lse, first)


def _as_1d(scalar: T.Tensor) -> T.Tensor:
    """View a scalar tensor as a length-1 vector (for concatenation)."""
    def vjp(g):
        return (g.reshape(scalar.data.shape),)
    return T._make(scalar.data.reshape(1), (scalar,), vjp, "as_1d")


def _one_hot0(n: int, dtype) -> np.ndarray:
    e = np.zeros(n, dtype=dtype)
    e[0] = 1.0
    return e


def momentum_update(theta_k, theta_q, m: float) -> None:
    """In-place convex combination: k <- m * k + (1 - m) * q, element-wise."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum coefficient must lie in [0, 1]")
    theta_k = list(theta_k)
    theta_q = list(theta_q)
    if len(theta_k) != len(theta_q):
        raise ValueError("parameter lists differ in length")
    for pk, pq in zip(theta_k, theta_q):
        if pk.data.shape != pq.data.shape:
            raise ValueError(f"parameter shapes differ: {pk.data.shape} vs {pq.data.shape}")
        pk.data = m * pk.data + (1.0 - m) * pq.data


def queue_push(queue: MomentumQueue, keys: np.ndarray) -> int:
    return queue.push(keys)


def _two_views(images: np.ndarray, acfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Interleaved augmented views: rows 2t and 2t+1 come from image t."""
    views = np.empty((2 * len(images),) + images.shape[1:], dtype=np.float32)
    for i, img in enumerate(images):
        views[2 * i] = augment(img, acfg, rng)
        views[2 * i + 1] = augment(img, acfg, rng)
    return views


def pretrain(dataset: LabeledDataset, cfg: PretrainConfig) -> EncoderModel:
    """Train a clean encoder from scratch; labels are ignored.

    Deterministic under ``cfg.seed``.  Per-epoch mean losses are logged and
    left in ``model.meta["pretrain_loss"]``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if len(dataset) < cfg.batch_size:
        raise ValueError("dataset smaller than one batch")
    side = dataset.images.shape[1]
    ss = np.random.SeedSequence(cfg.seed)
    init_rng, shuffle_rng, aug_rng = (np.random.default_rng(s) for s in ss.spawn(3))

    model = EncoderModel.init(side, cfg.hidden_dims, cfg.feature_dim, rng=init_rng)
    opt = T.Adam(cfg.learning_rate)
    history: list[float] = []

    if cfg.algorithm == "simclr":
        _run_simclr(model, dataset, cfg, opt, shuffle_rng, aug_rng, history)
    else:
        _run_moco(model, dataset, cfg, opt, shuffle_rng, aug_rng, history)

    model.meta["pretrain_loss"] = history
    model.meta["algorithm"] = cfg.algorithm
    return model


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield perm[start:start + batch_size]


def _run_simclr(model, dataset, cfg, opt, shuffle_rng, aug_rng, history):
    params = model.params()
    for epoch in range(cfg.epochs):
        total, steps = 0.0, 0
        for idx in _batches(len(dataset), cfg.batch_size, shuffle_rng):
            views = _two_views(dataset.images[idx], cfg.augment, aug_rng)
            z = model.forward_batch(flatten_images(views), project=True)
            loss = ntxent_loss(z, cfg.temperature)
            T.zero_grads(params)
            loss.backward()
            opt.step(params)
            total += loss.item()
            steps += 1
        history.append(total / max(steps, 1))
        logger.info("pretrain simclr epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, history[-1])


def _normalize_rows_np(a: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(a.astype(np.float64) ** 2, axis=1))
    safe = np.where(norms > T.NORM_EPS, norms, 1.0)
    out = (a / safe[:, None]).astype(np.float32)
    out[norms <= T.NORM_EPS] = 0.0
    return out


def _run_moco(model, dataset, cfg, opt, shuffle_rng, aug_rng, history):
    key_encoder = model.frozen_copy()
    queue = MomentumQueue(cfg.queue_capacity)
    params = model.params()
    for epoch in range(cfg.epochs):
        total, steps = 0.0, 0
        for idx in _batches(len(dataset), cfg.batch_size, shuffle_rng):
            imgs = dataset.images[idx]
            v_q = np.stack([augment(im, cfg.augment, aug_rng) for im in imgs])
            v_k = np.stack([augment(im, cfg.augment, aug_rng) for im in imgs])
            keys = _normalize_rows_np(key_encoder.forward_batch(flatten_images(v_k), project=True).data)
            if len(queue) == 0:
                # warm-up: seed the negatives before the first gradient step
                queue.push(keys)
                continue
            q = T.rows_normalize(model.forward_batch(flatten_images(v_q), project=True))
            loss = _moco_batch_loss(q, keys, queue.contents(), cfg.temperature)
            T.zero_grads(params)
            loss.backward()
            opt.step(params)
            momentum_update(key_encoder.params(), params, cfg.momentum)
            queue.push(keys)
            total += loss.item()
            steps += 1
        history.append(total / max(steps, 1))
        logger.info("pretrain moco epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, history[-1])


def _moco_batch_loss(q: T.Tensor, keys: np.ndarray, negatives: np.ndarray,
                     temperature: float) -> T.Tensor:
    """Batched version of ``moco_loss``: mean over the row-wise losses."""
    inv_t = 1.0 / temperature
    pos = T.scale(T.reduce_sum(T.mul(q, T.Tensor(keys)), axis=1), inv_t)     # (B,)
    neg = T.scale(T.matmul(q, T.Tensor(negatives.T.copy())), inv_t)           # (B, K)
    c = np.maximum(pos.data, neg.data.max(axis=1)).astype(q.data.dtype)       # (B,)
    pos_s = T.add(pos, T.Tensor(-c))
    neg_s = T.add(neg, T.Tensor(-c[:, None]))
    denom = T.add(T.exp(pos_s), T.reduce_sum(T.exp(neg_s), axis=1))
    return T.mean(T.sub(T.log(denom), pos_s))
