"""Confusion counts, scalar metrics, ROC curve and AUC."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence


class DegenerateMetricWarning(RuntimeWarning):
    """A metric's denominator was zero and a convention value was used."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


class Scores(NamedTuple):
    acc: float
    tpr: float
    fpr: float
    pre: float
    f1: float


def confusion(pairs: Iterable[tuple[int, int]]) -> ConfusionCounts:
    """Count (label, predicted) pairs into the four quadrants."""
    tp = tn = fp = fn = 0
    for label, pred in pairs:
        if label not in (0, 1) or pred not in (0, 1):
            raise ValueError(f"labels and predictions must be 0 or 1, got ({label!r}, {pred!r})")
        if label == 1:
            tp += pred == 1
            fn += pred == 0
        else:
            fp += pred == 1
            tn += pred == 0
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def _ratio(num: float, den: float, name: str) -> float:
    if den == 0:
        warnings.warn(f"{name}: zero denominator, reporting 0", DegenerateMetricWarning, stacklevel=3)
        return 0.0
    return num / den


def scalar_metrics(c: ConfusionCounts) -> Scores:
    acc = _ratio(c.tp + c.tn, c.total, "ACC")
    tpr = _ratio(c.tp, c.tp + c.fn, "TPR")
    fpr = _ratio(c.fp, c.fp + c.tn, "FPR")
    pre = _ratio(c.tp, c.tp + c.fp, "PRE")
    f1 = _ratio(2 * pre * tpr, pre + tpr, "F1")
    return Scores(acc, tpr, fpr, pre, f1)


class RocPoint(NamedTuple):
    threshold: float
    fpr: float
    tpr: float


def roc_curve(scored: Sequence[tuple[int, float]]) -> tuple[list[RocPoint], float | None]:
    """Sweep thresholds over distinct scores, highest first.

    A sample counts as positive at threshold ``s`` when its score is
    ``>= s``. The curve starts at ``(+inf, 0, 0)``. AUC is the trapezoid
    area, which gives tied positive/negative pairs half credit; it is
    ``None`` when only one class is present.
    """
    pos = sum(1 for y, _ in scored if y == 1)
    neg = len(scored) - pos
    for _, s in scored:
        if not math.isfinite(s):
            raise ValueError("scores must be finite")
    by_score: dict[float, list[int]] = {}
    for y, s in scored:
        counts = by_score.setdefault(float(s), [0, 0])
        counts[y] += 1

    points = [RocPoint(math.inf, 0.0, 0.0)]
    tp = fp = 0
    area = 0.0
    for s in sorted(by_score, reverse=True):
        n_neg, n_pos = by_score[s]
        prev_tp, prev_fp = tp, fp
        tp += n_pos
        fp += n_neg
        # area in count units: trapezoid between consecutive points
        area += (fp - prev_fp) * (tp + prev_tp) / 2.0
        points.append(RocPoint(s, fp / neg if neg else 0.0, tp / pos if pos else 0.0))
    auc = area / (pos * neg) if pos and neg else None
    return points, auc


@dataclass(frozen=True)
class Prediction:
    id: str
    score: float
    label: int
    predicted: int


@dataclass(frozen=True)
class EvalReport:
    counts: ConfusionCounts
    acc: float
    tpr: float
    fpr: float
    pre: float
    f1: float
    roc: list[RocPoint] = field(repr=False)
    auc: float | None
    predictions: list[Prediction] = field(repr=False)

    @property
    def scores(self) -> Scores:
        return Scores(self.acc, self.tpr, self.fpr, self.pre, self.f1)

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "tpr": self.tpr,
            "fpr": self.fpr,
            "pre": self.pre,
            "f1": self.f1,
            "auc": self.auc,
            "counts": self.counts.to_dict(),
        }


def evaluate(predictions: Sequence[Prediction]) -> EvalReport:
    """Build a full report from per-example predictions."""
    counts = confusion((p.label, p.predicted) for p in predictions)
    scores = scalar_metrics(counts)
    roc, auc = roc_curve([(p.label, p.score) for p in predictions])
    return EvalReport(counts, *scores, roc=roc, auc=auc, predictions=list(predictions))


def roc_csv(points: Sequence[RocPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["threshold", "fpr", "tpr"])
    for p in points:
        writer.writerow([repr(p.threshold) if math.isfinite(p.threshold) else "inf", repr(p.fpr), repr(p.tpr)])
    return buf.getvalue()
