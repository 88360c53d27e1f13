"""Stage orchestration: pretrain -> embed -> downstream -> attack -> verify.

Every stage is a pure function of the experiment config plus checkpoints on
disk, so stages can be re-run independently and a full run reproduces
bit-identically under the same config and seeds.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .contrastive import PretrainConfig, pretrain
from .data import (AugmentConfig, LabeledDataset, TriggerSpec, TRIGGER_KINDS,
                   gen_synthetic, load_cifar10, make_trigger, split_stratified)
from .downstream import AttackConfig, Classifier, finetune, prune, train_head
from .encoder import EncoderModel
from .verify import acc, verify_ownership, wacc
from .watermark import WatermarkConfig, embed_watermark

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "embed", "downstream", "attack", "verify")
CSV_COLUMNS = ("run_id", "stage", "dataset", "metric", "value", "seed")
_STAGE_ORDER = {name: i for i, name in enumerate(STAGES)}

CLEAN_CKPT = "clean.ckpt"
WM_CKPT = "wm.ckpt"
DOWNSTREAM_CKPT = "downstream.ckpt"
DOWNSTREAM_CLEAN_CKPT = "downstream_clean.ckpt"
METRICS_CSV = "metrics.csv"
VERIFY_JSON = "verify.json"


class PipelineError(RuntimeError):
    """A stage cannot run (missing prerequisite, bad state)."""


def resolve_out_dir(cli_out: str | None, cfg: ExperimentConfig) -> Path:
    if cli_out:
        return Path(cli_out)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    root = os.environ.get("ENCWM_OUT_ROOT", "runs")
    return Path(root) / cfg.run_id


# ---------------------------------------------------------------------------
# deterministic data plumbing
# ---------------------------------------------------------------------------

def _dataset_label(cfg: ExperimentConfig) -> str:
    d = cfg.dataset
    if d.kind == "cifar10":
        return "cifar10"
    return f"synthetic-{d.classes}x{d.side}"


def _pretrain_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    d = cfg.dataset
    if d.kind == "cifar10":
        full = load_cifar10(d.paths, d.max_per_class)
        pre, _rest = split_stratified(full, [0.5, 0.5], cfg.stage_seed("cifar-pool"))
        return pre
    seed = d.seed if d.seed is not None else cfg.stage_seed("dataset")
    return gen_synthetic(d.classes, d.per_class, d.side, seed)


def _downstream_splits(cfg: ExperimentConfig):
    """Labeled train/test/verification sets, disjoint from pre-training data."""
    d = cfg.downstream
    if cfg.dataset.kind == "cifar10":
        full = load_cifar10(cfg.dataset.paths, cfg.dataset.max_per_class)
        _pre, rest = split_stratified(full, [0.5, 0.5], cfg.stage_seed("cifar-pool"))
        pool = rest
    else:
        seed = d.seed if d.seed is not None else cfg.stage_seed("downstream-data")
        pool = gen_synthetic(d.classes, d.per_class, cfg.dataset.side, seed)
    return split_stratified(pool, list(d.split), cfg.stage_seed("downstream-split"))


def _trigger(cfg: ExperimentConfig) -> TriggerSpec:
    return make_trigger(cfg.trigger.kind, cfg.trigger.size, "bottom_right", cfg.dataset.side)


def _wrong_trigger(cfg: ExperimentConfig) -> TriggerSpec:
    kind = cfg.verify.wrong_trigger_kind
    if kind is None:
        # most dissimilar default: the cross differs from every square patch
        # in both shape and color
        kind = "cross" if cfg.trigger.kind != "cross" else "checkerboard"
    if kind == cfg.trigger.kind:
        raise PipelineError("wrong_trigger_kind must differ from the embedded trigger kind")
    return make_trigger(kind, cfg.trigger.size, "bottom_right", cfg.dataset.side)


def _ckpt(out_dir: Path, name: str, stage_needed: str) -> Path:
    path = out_dir / name
    if not path.exists():
        raise PipelineError(f"missing checkpoint {name}; run the '{stage_needed}' stage first")
    return path


def _load_encoder(path: Path) -> EncoderModel:
    model = load_checkpoint(path)
    if not isinstance(model, EncoderModel):
        raise PipelineError(f"{path.name} is not an encoder checkpoint")
    return model


def _load_classifier(path: Path) -> Classifier:
    model = load_checkpoint(path)
    if not isinstance(model, Classifier):
        raise PipelineError(f"{path.name} is not a classifier checkpoint")
    return model


# ---------------------------------------------------------------------------
# metrics file
# ---------------------------------------------------------------------------

def read_metrics(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_metrics(path: Path, rows: list[dict]) -> None:
    rows = sorted(rows, key=lambda r: _STAGE_ORDER.get(r["stage"], 99))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _replace_stage_rows(out_dir: Path, cfg: ExperimentConfig, stage: str,
                        metrics: list[tuple[str, float]]) -> None:
    """Rewrite metrics.csv with this stage's rows replacing any older ones.

    Sorting is stable, so rows keep their insertion order within a stage and
    reruns reproduce the file byte-for-byte.
    """
    path = out_dir / METRICS_CSV
    rows = [r for r in read_metrics(path) if r["stage"] != stage] if path.exists() else []
    label = _dataset_label(cfg)
    for metric, value in metrics:
        rows.append({"run_id": cfg.run_id, "stage": stage, "dataset": label,
                     "metric": metric, "value": f"{value:.10g}", "seed": str(cfg.seed)})
    _write_metrics(path, rows)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_pretrain(cfg: ExperimentConfig, out_dir: Path) -> Path:
    dataset = _pretrain_dataset(cfg)
    p = cfg.pretrain
    epochs = p.epochs if p.epochs is not None else (60 if p.algorithm == "simclr" else 80)
    pcfg = PretrainConfig(
        algorithm=p.algorithm, batch_size=p.batch_size, epochs=epochs,
        temperature=p.temperature, momentum=p.momentum, queue_capacity=p.queue_capacity,
        learning_rate=p.learning_rate, feature_dim=p.feature_dim,
        hidden_dims=tuple(p.hidden_dims),
        augment=AugmentConfig(crop_scale=tuple(p.augment.crop_scale),
                              flip_prob=p.augment.flip_prob, jitter=p.augment.jitter,
                              noise_sigma=p.augment.noise_sigma,
                              seed=cfg.stage_seed("augment")),
        seed=cfg.stage_seed("pretrain"))
    model = pretrain(dataset, pcfg)
    path = save_checkpoint(model, out_dir / CLEAN_CKPT, config_hash=cfg.hash(),
                           provenance={"run_id": cfg.run_id, "stage": "pretrain",
                                       "algorithm": p.algorithm})
    history = model.meta.get("pretrain_loss", [])
    rows = []
    if history:
        rows = [("pretrain_loss_first", history[0]), ("pretrain_loss_final", history[-1])]
    _replace_stage_rows(out_dir, cfg, "pretrain", rows)
    logger.info("wrote %s", path)
    return path


def stage_embed(cfg: ExperimentConfig, out_dir: Path) -> Path:
    f = _load_encoder(_ckpt(out_dir, CLEAN_CKPT, "pretrain"))
    dataset = _pretrain_dataset(cfg)
    w = cfg.watermark
    wcfg = WatermarkConfig(trigger=_trigger(cfg), eta=w.eta, epochs=w.epochs,
                           batch_size=w.batch_size, learning_rate=w.learning_rate,
                           dropout=w.dropout, optimizer=w.optimizer,
                           seed=cfg.stage_seed("embed"))
    wm = embed_watermark(f, dataset, wcfg)
    provenance = dict(wm.provenance, run_id=cfg.run_id, stage="embed")
    path = save_checkpoint(wm.encoder, out_dir / WM_CKPT, config_hash=cfg.hash(),
                           provenance=provenance)
    rows = []
    if wm.history:
        rows = [("loss_uniqueness_final", wm.history[-1][0]),
                ("loss_preserving_final", wm.history[-1][1])]
    _replace_stage_rows(out_dir, cfg, "embed", rows)
    logger.info("wrote %s", path)
    return path


def stage_downstream(cfg: ExperimentConfig, out_dir: Path) -> tuple[Path, Path]:
    f_clean = _load_encoder(_ckpt(out_dir, CLEAN_CKPT, "pretrain"))
    f_wm = _load_encoder(_ckpt(out_dir, WM_CKPT, "embed"))
    train, test, _ver = _downstream_splits(cfg)
    d = cfg.downstream
    # same head seed for both encoders: the clean/watermarked comparison
    # should differ only in the encoder
    head_seed = cfg.stage_seed("head")
    clf_clean = train_head(f_clean, train, d.head_epochs, d.head_lr, seed=head_seed)
    clf_wm = train_head(f_wm, train, d.head_epochs, d.head_lr, seed=head_seed)
    path_clean = save_checkpoint(clf_clean, out_dir / DOWNSTREAM_CLEAN_CKPT,
                                 config_hash=cfg.hash(),
                                 provenance={"run_id": cfg.run_id, "stage": "downstream",
                                             "encoder": "clean"})
    path_wm = save_checkpoint(clf_wm, out_dir / DOWNSTREAM_CKPT, config_hash=cfg.hash(),
                              provenance={"run_id": cfg.run_id, "stage": "downstream",
                                          "encoder": "watermarked"})
    _replace_stage_rows(out_dir, cfg, "downstream",
                        [("acc_clean", acc(clf_clean, test)),
                         ("acc_watermarked", acc(clf_wm, test))])
    logger.info("wrote %s and %s", path_clean, path_wm)
    return path_clean, path_wm


def stage_attack(cfg: ExperimentConfig, out_dir: Path) -> None:
    clf = _load_classifier(_ckpt(out_dir, DOWNSTREAM_CKPT, "downstream"))
    train, test, ver = _downstream_splits(cfg)
    trig = _trigger(cfg)
    rows: list[tuple[str, float]] = []
    for kind in cfg.attack.kinds:
        acfg = AttackConfig(kind=kind, epochs=cfg.attack.epochs,
                            learning_rate=cfg.attack.learning_rate,
                            seed=cfg.stage_seed(f"attack-{kind}"))
        attacked = finetune(clf, acfg, train)
        rows.append((f"acc_{kind.lower()}", acc(attacked, test)))
        rows.append((f"wacc_{kind.lower()}", wacc(attacked, ver.images, trig)))
    method = cfg.attack.prune_method
    for ratio in cfg.attack.prune_ratios:
        pruned = prune(clf, ratio, method, seed=cfg.stage_seed(f"prune-{ratio:g}"))
        rows.append((f"acc_prune_{method}_{ratio:g}", acc(pruned, test)))
        rows.append((f"wacc_prune_{method}_{ratio:g}", wacc(pruned, ver.images, trig)))
    _replace_stage_rows(out_dir, cfg, "attack", rows)


def stage_verify(cfg: ExperimentConfig, out_dir: Path) -> Path:
    clf_wm = _load_classifier(_ckpt(out_dir, DOWNSTREAM_CKPT, "downstream"))
    clf_clean = _load_classifier(_ckpt(out_dir, DOWNSTREAM_CLEAN_CKPT, "downstream"))
    _train, test, ver = _downstream_splits(cfg)
    trig = _trigger(cfg)
    wrong = _wrong_trigger(cfg)
    threshold = cfg.verify.threshold

    reports = [
        dict(verify_ownership(clf_wm, ver.images, trig, threshold, labeled=test).to_dict(),
             model="downstream_watermarked", trigger="correct"),
        dict(verify_ownership(clf_clean, ver.images, trig, threshold, labeled=test).to_dict(),
             model="downstream_clean", trigger="correct"),
        dict(verify_ownership(clf_wm, ver.images, wrong, threshold).to_dict(),
             model="downstream_watermarked", trigger="wrong"),
    ]
    payload = {"run_id": cfg.run_id, "seed": cfg.seed, "threshold": threshold,
               "trigger_kind": cfg.trigger.kind, "wrong_trigger_kind": wrong.kind,
               "reports": reports}
    path = out_dir / VERIFY_JSON
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _replace_stage_rows(out_dir, cfg, "verify",
                        [("wacc_watermarked", reports[0]["wacc"]),
                         ("wacc_clean", reports[1]["wacc"]),
                         ("wacc_wrong_trigger", reports[2]["wacc"])])
    logger.info("wrote %s", path)
    return path


_STAGE_FN = {
    "pretrain": stage_pretrain,
    "embed": stage_embed,
    "downstream": stage_downstream,
    "attack": stage_attack,
    "verify": stage_verify,
}


def run(cfg: ExperimentConfig, out_dir: Path, stages=STAGES) -> Path:
    """Run the requested stages in dependency order; returns the output dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(set(stages), key=_STAGE_ORDER.__getitem__)
    for name in ordered:
        logger.info("stage %s (run_id=%s seed=%d)", name, cfg.run_id, cfg.seed)
        _STAGE_FN[name](cfg, out_dir)
    return out_dir
