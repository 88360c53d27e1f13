"""Black-box ownership verification.

Only classifier predictions (labels) are consulted — never features — so
the checks work with pure oracle access to a suspect model.  WACC is the
fraction of samples whose prediction flips once the trigger is applied;
ownership is declared when it clears a threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .data import LabeledDataset, TriggerSpec, apply_trigger_batch
from .downstream import Classifier


@dataclass
class VerificationReport:
    wacc: float
    acc: float | None
    threshold: float
    decision: str  # "plagiarized" | "independent"
    sample_count: int
    trigger_id: str
    model_id: str

    def to_dict(self) -> dict:
        return asdict(self)


def acc(clf: Classifier, labeled: LabeledDataset) -> float:
    """Fraction of clean samples predicted correctly."""
    if len(labeled) == 0:
        raise ValueError("empty labeled set")
    preds = clf.predict_batch(labeled.images)
    return float(np.mean(preds == labeled.labels))


def wacc(clf: Classifier, samples: np.ndarray, trig: TriggerSpec) -> float:
    """Fraction of samples whose prediction changes under the trigger.

    Needs no labels: clean predictions are compared against triggered ones.
    """
    samples = np.asarray(samples, dtype=np.float32)
    if len(samples) == 0:
        raise ValueError("empty sample set")
    clean = clf.predict_batch(samples)
    triggered = clf.predict_batch(apply_trigger_batch(samples, trig))
    return float(np.mean(clean != triggered))


def verify_ownership(clf: Classifier, samples: np.ndarray, trig: TriggerSpec,
                     threshold: float = 0.7,
                     labeled: LabeledDataset | None = None) -> VerificationReport:
    """Threshold decision: plagiarized iff wacc > threshold (strict).

    ``labeled``, when given, adds a clean-accuracy figure to the report.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly inside (0, 1)")
    w = wacc(clf, samples, trig)
    a = acc(clf, labeled) if labeled is not None else None
    return VerificationReport(
        wacc=w,
        acc=a,
        threshold=threshold,
        decision="plagiarized" if w > threshold else "independent",
        sample_count=len(samples),
        trigger_id=trig.trigger_id,
        model_id=clf.provenance.get("model_id", clf.param_digest()),
    )
