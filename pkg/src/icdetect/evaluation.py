"""Confusion counts, metrics, F1-optimal thresholds and patient-disjoint splits.

IC is the positive class throughout, and a score counts as positive only when
it is strictly greater than the threshold.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

IC = "IC"
REST = "Rest"
PATCH = "patch"
SLIDE = "slide"


class LengthMismatch(ValueError):
    pass


class EmptyEvaluation(ValueError):
    pass


class SingleClass(ValueError):
    pass


class SinglePatientWarning(UserWarning):
    pass


def _as_positive(values) -> np.ndarray:
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values)
    if arr.dtype.kind in "US" or arr.dtype == object:
        bad = set(arr.tolist()) - {IC, REST}
        if bad:
            raise ValueError(f"unknown class labels {sorted(map(str, bad))}")
        return arr == IC
    return arr.astype(bool)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_json(self) -> dict:
        return {"TP": self.tp, "FP": self.fp, "FN": self.fn, "TN": self.tn}


def confusion(predictions, labels) -> ConfusionCounts:
    pred = _as_positive(predictions)
    true = _as_positive(labels)
    if len(pred) != len(true):
        raise LengthMismatch(f"{len(pred)} predictions vs {len(true)} labels")
    if len(pred) == 0:
        raise EmptyEvaluation("nothing to evaluate")
    return ConfusionCounts(tp=int(np.sum(pred & true)), fp=int(np.sum(pred & ~true)),
                           fn=int(np.sum(~pred & true)), tn=int(np.sum(~pred & ~true)))


@dataclass
class MetricsReport:
    """Metric values are None where the denominator is zero (undefined)."""

    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    counts: ConfusionCounts
    level: Optional[str] = None
    center: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"level": self.level, "center": self.center, "accuracy": self.accuracy,
               "precision": self.precision, "recall": self.recall, "f1": self.f1,
               "confusion": self.counts.to_json()}
        out.update(self.extra)
        return out


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def metrics(c: ConfusionCounts, level: Optional[str] = None,
            center: Optional[str] = None) -> MetricsReport:
    if c.total <= 0:
        raise EmptyEvaluation("confusion counts are empty")
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricsReport(_ratio(c.tp + c.tn, c.total), precision, recall, f1, c, level, center)


def f1_optimal_threshold(scores, labels) -> float:
    """Candidate thresholds are the distinct scores plus 0 and 1; the one with
    the highest F1 wins, ties going to the largest threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if len(s) != len(y):
        raise LengthMismatch(f"{len(s)} scores vs {len(y)} labels")
    if y.all() or not y.any():
        raise SingleClass("threshold selection needs both classes")
    candidates = np.unique(np.concatenate([s, [0.0, 1.0]]))
    order = np.argsort(s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    pos_le = np.concatenate([[0], np.cumsum(y_sorted)])
    n_le = np.searchsorted(s_sorted, candidates, side="right")
    n_pos = int(y.sum())
    predicted = len(s) - n_le
    tp = n_pos - pos_le[n_le]
    f1 = 2.0 * tp / (predicted + n_pos)
    best = np.flatnonzero(f1 == f1.max())[-1]
    return float(candidates[best])


def slide_score(scores: Sequence[float], p0: float) -> float:
    """Sum of patch scores strictly above ``p0`` divided by the patch count,
    accumulated in the given order in double precision."""
    n = len(scores)
    if n == 0:
        return 0.0
    total = 0.0
    for p in scores:
        p = float(p)
        if p > p0:
            total += p
    return total / n


# ---------------------------------------------------------------------------
# patient-disjoint split

@dataclass
class SplitResult:
    train_slides: list
    test_slides: list
    train_patients: list
    test_patients: list
    warning: Optional[str] = None

    def train_fraction(self) -> float:
        n = len(self.train_slides) + len(self.test_slides)
        return len(self.train_slides) / n if n else 0.0


def _patient_slides(manifest) -> dict:
    if hasattr(manifest, "patient_slides"):
        return manifest.patient_slides()
    return {p: list(s) for p, s in dict(manifest).items()}


def patient_split(manifest, ratio: float = 0.8, seed: int = 0) -> SplitResult:
    """Assign whole patients to train so its slide count is the smallest
    achievable value that is at least ``ratio`` of all slides.

    Patients are visited in a seeded shuffle and taken whenever the remaining
    ones can still complete that exact count, so the seed decides which of the
    equally good partitions is returned.
    """
    folders = _patient_slides(manifest)
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    patients = sorted(folders)
    if not patients:
        raise EmptyEvaluation("manifest has no patients")
    if len(patients) == 1:
        only = patients[0]
        return SplitResult(list(folders[only]), [], [only], [],
                           warning="single patient: everything assigned to train")
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    counts = [len(folders[p]) for p in order]
    total = sum(counts)
    target = math.ceil(Fraction(str(ratio)) * total)

    # reach[i]: bitset of slide totals achievable with patients order[i:]
    reach = [0] * (len(order) + 1)
    reach[-1] = 1
    for i in range(len(order) - 1, -1, -1):
        reach[i] = reach[i + 1] | (reach[i + 1] << counts[i])
    best = next(s for s in range(target, total + 1) if reach[0] >> s & 1)

    train, test = [], []
    remaining = best
    for i, p in enumerate(order):
        c = counts[i]
        if c <= remaining and reach[i + 1] >> (remaining - c) & 1:
            train.append(p)
            remaining -= c
        else:
            test.append(p)
    assert remaining == 0
    warning = None
    if not test:
        warning = "no patient left for the test side"
        warnings.warn(warning, SinglePatientWarning)
    train_slides = [s for p in train for s in folders[p]]
    test_slides = [s for p in test for s in folders[p]]
    return SplitResult(train_slides, test_slides, train, test, warning)


# ---------------------------------------------------------------------------

def evaluate_patches(model, patches, center: Optional[str] = None) -> MetricsReport:
    scores = model.predict_proba(patches.images)
    pred = scores > model.patch_threshold
    report = metrics(confusion(pred, patches.labels.astype(bool)), PATCH, center)
    report.extra["n_patches"] = len(patches)
    return report


def evaluate_slides(model, slides: Iterable, center: Optional[str] = None,
                    cfg=None, workers: int = 1) -> tuple[MetricsReport, list]:
    """``slides`` yields objects with ``slide_id``, ``pyramid`` and ``label``
    (1 for IC). Each slide goes through the full scoring pipeline."""
    from .pipeline import PipelineConfig, score_slide

    cfg = cfg or PipelineConfig()
    preds, labels, results = [], [], []
    for case in slides:
        res = score_slide(case.pyramid, model, cfg, slide_id=case.slide_id, workers=workers)
        results.append(res)
        preds.append(res.predicted == IC)
        labels.append(bool(case.label))
    report = metrics(confusion(preds, labels), SLIDE, center)
    report.extra["n_slides"] = len(labels)
    return report, results


def evaluate_model(model, test, level: str, center: Optional[str] = None, **kw) -> MetricsReport:
    if level == PATCH:
        return evaluate_patches(model, test, center)
    if level == SLIDE:
        return evaluate_slides(model, test, center, **kw)[0]
    raise ValueError(f"level must be {PATCH!r} or {SLIDE!r}")
