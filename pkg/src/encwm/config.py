"""Experiment configuration: JSON schema, strict validation, seed derivation.

Unknown keys are hard errors (a typo in an experiment grid should fail
fast, not silently fall back to defaults).  Every error names the full
field path.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; the message carries the offending field path."""


def derive_seed(master: int, label: str) -> int:
    """Stable per-stage seed from the master seed and a stage label."""
    digest = hashlib.sha256(f"{master}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class DatasetSection:
    kind: str = "synthetic"
    classes: int = 4
    per_class: int = 192
    side: int = 16
    seed: int | None = None
    paths: list = field(default_factory=list)       # cifar10 only
    max_per_class: int | None = None                # cifar10 only


@dataclass
class AugmentSection:
    crop_scale: list = field(default_factory=lambda: [0.7, 1.0])
    flip_prob: float = 0.5
    jitter: float = 0.3
    noise_sigma: float = 0.03


@dataclass
class PretrainSection:
    algorithm: str = "simclr"
    batch_size: int = 64
    epochs: int | None = None  # None: 60 for simclr, 80 for the slower moco warm-up
    temperature: float = 0.5
    momentum: float = 0.99
    queue_capacity: int = 512
    learning_rate: float = 1e-3
    feature_dim: int = 32
    hidden_dims: list = field(default_factory=lambda: [256, 128])
    augment: AugmentSection = field(default_factory=AugmentSection)


@dataclass
class TriggerSection:
    kind: str = "checkerboard"
    size: int = 4


@dataclass
class WatermarkSection:
    eta: float = 0.5
    epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 1e-3
    dropout: float = 0.2
    optimizer: str = "adam"


@dataclass
class DownstreamSection:
    classes: int = 4
    per_class: int = 128
    head_epochs: int = 60
    head_lr: float = 0.2
    split: list = field(default_factory=lambda: [0.5, 0.25, 0.25])  # train/test/verify
    seed: int | None = None


@dataclass
class AttackSection:
    kinds: list = field(default_factory=lambda: ["RTLL", "FTAL"])
    epochs: int | None = None
    learning_rate: float | None = None
    prune_method: str = "l1"
    prune_ratios: list = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 0.9, 0.95])


@dataclass
class VerifySection:
    threshold: float = 0.7
    wrong_trigger_kind: str | None = None  # default: first kind that differs


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    seed: int = 0
    out_dir: str | None = None
    dataset: DatasetSection = field(default_factory=DatasetSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    trigger: TriggerSection = field(default_factory=TriggerSection)
    watermark: WatermarkSection = field(default_factory=WatermarkSection)
    downstream: DownstreamSection = field(default_factory=DownstreamSection)
    attack: AttackSection = field(default_factory=AttackSection)
    verify: VerifySection = field(default_factory=VerifySection)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stage_seed(self, label: str) -> int:
        return derive_seed(self.seed, label)


_SECTION_TYPES = {
    "dataset": DatasetSection,
    "pretrain": PretrainSection,
    "trigger": TriggerSection,
    "watermark": WatermarkSection,
    "downstream": DownstreamSection,
    "attack": AttackSection,
    "verify": VerifySection,
    "augment": AugmentSection,
}

_SCALARS = (str, int, float, bool, type(None))


def _coerce(value, template, path: str):
    """Validate `value` against the type of the dataclass default `template`."""
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {type(value).__name__}")
        return value
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {type(value).__name__}")
        return value
    if isinstance(template, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {type(value).__name__}")
        return float(value)
    if isinstance(template, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {type(value).__name__}")
        return value
    if isinstance(template, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list, got {type(value).__name__}")
        return list(value)
    if template is None:
        if not isinstance(value, _SCALARS):
            raise ConfigError(f"{path}: expected scalar or null, got {type(value).__name__}")
        return value
    raise ConfigError(f"{path}: unsupported value type")


def _parse_section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    out = cls()
    known = {f: getattr(out, f) for f in out.__dataclass_fields__}
    for key, value in data.items():
        here = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{here}: unknown key")
        template = known[key]
        if key in _SECTION_TYPES and isinstance(template, _SECTION_TYPES[key]):
            setattr(out, key, _parse_section(type(template), value, here))
        else:
            setattr(out, key, _coerce(value, template, here))
    return out


def validate_config(data: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a raw JSON dict, defaults applied."""
    cfg = _parse_section(ExperimentConfig, data, "")
    if cfg.dataset.kind not in ("synthetic", "cifar10"):
        raise ConfigError("dataset.kind: must be 'synthetic' or 'cifar10'")
    if cfg.dataset.kind == "cifar10" and not cfg.dataset.paths:
        raise ConfigError("dataset.paths: required for cifar10")
    if len(cfg.downstream.split) != 3 or abs(sum(cfg.downstream.split) - 1.0) > 1e-9:
        raise ConfigError("downstream.split: need three fractions summing to 1")
    for kind in cfg.attack.kinds:
        if kind not in ("RTLL", "FTAL"):
            raise ConfigError(f"attack.kinds: unknown attack {kind!r}")
    if cfg.attack.prune_method not in ("l1", "random"):
        raise ConfigError("attack.prune_method: must be 'l1' or 'random'")
    if not 0.0 < cfg.verify.threshold < 1.0:
        raise ConfigError("verify.threshold: must lie strictly inside (0, 1)")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return validate_config(data)
