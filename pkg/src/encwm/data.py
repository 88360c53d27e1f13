"""Desk-scale image data: synthetic texture classes, contrastive-view
augmentation, and backdoor trigger construction / injection.

Images are float32 HWC arrays with pixels in [0, 1].  Everything here is a
pure function of its arguments plus an explicit seed or generator, so runs
reproduce bit-for-bit.
"""

from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass, field

import numpy as np

TRIGGER_KINDS = ("white_square", "green_square", "checkerboard", "cross")


@dataclass
class LabeledDataset:
    """Images plus integer class labels in [0, class_count)."""

    images: np.ndarray  # (n, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels out of range for class_count")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(self.images[idx].copy(), self.labels[idx].copy(), self.class_count)


@dataclass
class TriggerSpec:
    """Full-image trigger pattern and binary mask; the watermark key."""

    pattern: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray     # (H, W, 3) float32, strictly {0, 1}
    kind: str = "custom"

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if self.pattern.shape != self.mask.shape:
            raise ValueError("pattern and mask shapes differ")
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValueError("mask must be strictly binary")
        if self.pattern.min() < 0.0 or self.pattern.max() > 1.0:
            raise ValueError("pattern pixels must lie in [0, 1]")

    @property
    def trigger_id(self) -> str:
        h = hashlib.sha256()
        h.update(self.pattern.tobytes())
        h.update(self.mask.tobytes())
        return h.hexdigest()[:12]


@dataclass
class AugmentConfig:
    """Knobs for the two-view augmentation used in contrastive pre-training."""

    crop_scale: tuple = (0.7, 1.0)
    flip_prob: float = 0.5
    jitter: float = 0.3
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("crop_scale must satisfy 0 < lo <= hi <= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.jitter < 0 or self.noise_sigma < 0:
            raise ValueError("jitter and noise_sigma must be nonnegative")


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.asarray(colorsys.hsv_to_rgb(h % 1.0, min(max(s, 0.0), 1.0), min(max(v, 0.0), 1.0)),
                      dtype=np.float32)


def gen_synthetic(class_count: int, per_class: int, side: int, seed) -> LabeledDataset:
    """Render a balanced dataset of procedural textures, one family per class.

    Each class owns a base hue and, more importantly, a blob-geometry
    signature (count and radius).  Hue jitter is wide enough that neighboring
    classes overlap in color, so a linear probe on raw pixels is middling
    while augmentation-invariant features pick up the geometry.
    """
    if class_count < 2:
        raise ValueError("need at least 2 classes")
    if side < 8:
        raise ValueError("side must be >= 8")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    images = np.empty((class_count * per_class, side, side, 3), dtype=np.float32)
    labels = np.repeat(np.arange(class_count, dtype=np.int64), per_class)
    for c in range(class_count):
        base_hue = (c / class_count + 0.07) % 1.0
        blob_count = 10 - 2 * (c % 4)
        blob_radius = side * (0.055 + 0.05 * c)
        for j in range(per_class):
            hue = base_hue + rng.uniform(-0.08, 0.08)
            bg = _hsv(hue, rng.uniform(0.5, 0.9), rng.uniform(0.45, 0.9))
            img = np.broadcast_to(bg, (side, side, 3)).copy()
            for _ in range(blob_count):
                cy, cx = rng.uniform(0, side, size=2)
                r = blob_radius * rng.uniform(0.8, 1.2)
                blob = _hsv(hue + 0.5 + rng.uniform(-0.06, 0.06),
                            rng.uniform(0.4, 0.9), rng.uniform(0.4, 1.0))
                w = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))
                img = img * (1.0 - w[:, :, None]) + blob * w[:, :, None]
            # global brightness plus an additive per-channel color cast: pure
            # nuisance that raw-pixel probes cannot marginalize linearly
            img = img * rng.uniform(0.8, 1.1) + rng.uniform(-0.10, 0.10, size=3)
            img = img + rng.normal(0.0, 0.02, size=img.shape)
            images[c * per_class + j] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels, class_count)


def _resize_bilinear(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = src.shape[0], src.shape[1]
    if h == out_h and w == out_w:
        return src.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None].astype(np.float32)
    fx = (xs - x0)[None, :, None].astype(np.float32)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One random view of an image: crop/resize, flip, color jitter, noise.

    Output keeps the input shape and stays clamped to [0, 1].  Two calls with
    independent draws give the two views of a positive pair.
    """
    h, w = img.shape[0], img.shape[1]
    out = img
    lo, hi = cfg.crop_scale
    if hi < 1.0 or lo < 1.0:
        s = rng.uniform(lo, hi)
        ch = max(1, int(round(h * s)))
        cw = max(1, int(round(w * s)))
        if ch < h or cw < w:
            oy = int(rng.integers(0, h - ch + 1))
            ox = int(rng.integers(0, w - cw + 1))
            out = _resize_bilinear(out[oy:oy + ch, ox:ox + cw], h, w)
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        out = out[:, ::-1, :]
    if cfg.jitter > 0:
        # color jitter: per-channel gain plus a per-channel additive cast,
        # both scaled by the same strength knob
        gain = 1.0 + rng.uniform(-cfg.jitter, cfg.jitter, size=3).astype(np.float32)
        cast = rng.uniform(-cfg.jitter / 2, cfg.jitter / 2, size=3).astype(np.float32)
        out = out * gain + cast
    if cfg.noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_trigger(img: np.ndarray, trig: TriggerSpec) -> np.ndarray:
    """Paste the trigger: pattern where mask=1, untouched pixels elsewhere."""
    if img.shape != trig.pattern.shape:
        raise ValueError(f"trigger shape {trig.pattern.shape} does not match image {img.shape}")
    return np.where(trig.mask == 1.0, trig.pattern, img)


def apply_trigger_batch(images: np.ndarray, trig: TriggerSpec) -> np.ndarray:
    if images.shape[1:] != trig.pattern.shape:
        raise ValueError(f"trigger shape {trig.pattern.shape} does not match images {images.shape[1:]}")
    return np.where(trig.mask == 1.0, trig.pattern, images)


def make_trigger(kind: str, size: int, corner: str = "bottom_right", image_side: int = 16) -> TriggerSpec:
    """Build a patch trigger of the given kind in the bottom-right corner."""
    if kind not in TRIGGER_KINDS:
        raise ValueError(f"unknown trigger kind {kind!r}; choose from {TRIGGER_KINDS}")
    if corner != "bottom_right":
        raise ValueError("only the bottom_right corner is supported")
    if not 1 <= size <= image_side:
        raise ValueError(f"trigger size {size} exceeds image side {image_side}")
    pattern = np.zeros((image_side, image_side, 3), dtype=np.float32)
    mask = np.zeros_like(pattern)
    y0 = x0 = image_side - size
    green = np.asarray([0.0, 1.0, 0.0], dtype=np.float32)
    if kind == "white_square":
        pattern[y0:, x0:] = 1.0
        mask[y0:, x0:] = 1.0
    elif kind == "green_square":
        pattern[y0:, x0:] = green
        mask[y0:, x0:] = 1.0
    elif kind == "checkerboard":
        cells = (np.add.outer(np.arange(size), np.arange(size)) % 2).astype(np.float32)
        pattern[y0:, x0:] = cells[:, :, None]
        mask[y0:, x0:] = 1.0
    else:  # cross: arms only, green
        t = max(1, size // 3)
        start = (size - t) // 2
        mask[y0 + start:y0 + start + t, x0:] = 1.0
        mask[y0:, x0 + start:x0 + start + t] = 1.0
        pattern[y0 + start:y0 + start + t, x0:] = green
        pattern[y0:, x0 + start:x0 + start + t] = green
    return TriggerSpec(pattern=pattern, mask=mask, kind=kind)


def flatten_images(images: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, H*W*C) float32, row-major."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return arr.reshape(arr.shape[0], -1)


def split_stratified(dataset: LabeledDataset, fractions, seed) -> list[LabeledDataset]:
    """Per-class shuffle and slice into len(fractions) disjoint parts."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in fractions]
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        bounds = np.floor(np.cumsum(np.asarray(fractions)) * len(idx) + 1e-9).astype(int)
        start = 0
        for part, stop in zip(parts, bounds):
            part.extend(idx[start:stop].tolist())
            start = stop
    return [dataset.subset(sorted(p)) for p in parts]


def load_cifar10(paths, max_per_class: int | None = None) -> LabeledDataset:
    """Read CIFAR-10 binary batches (1 label byte + 3072 pixel bytes each).

    Pixel bytes are the three 32x32 channel planes in R, G, B order; values
    are mapped to [0, 1] by dividing by 255.
    """
    record = 3073
    images: list[np.ndarray] = []
    labels: list[int] = []
    counts = np.zeros(10, dtype=int)
    for path in paths:
        with open(path, "rb") as fh:
            buf = fh.read()
        if len(buf) == 0 or len(buf) % record != 0:
            raise ValueError(f"{path}: not a CIFAR-10 binary batch (size {len(buf)})")
        arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
        for row in arr:
            label = int(row[0])
            if label > 9:
                raise ValueError(f"{path}: label byte {label} out of range")
            if max_per_class is not None and counts[label] >= max_per_class:
                continue
            counts[label] += 1
            pix = row[1:].reshape(3, 32, 32).transpose(1, 2, 0)
            images.append(pix.astype(np.float32) / 255.0)
            labels.append(label)
    if not images:
        raise ValueError("no CIFAR-10 records read")
    return LabeledDataset(np.stack(images), np.asarray(labels), 10)
