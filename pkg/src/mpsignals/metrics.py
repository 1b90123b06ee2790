"""Binary classification metrics and fold aggregation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

METRIC_NAMES = ("accuracy", "f1", "precision", "recall", "mcc", "nmcc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass
class MetricsEntry:
    accuracy: float
    f1: float
    precision: float
    recall: float
    mcc: float
    nmcc: float
    counts: ConfusionCounts | None = None
    degenerate: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        d = {name: getattr(self, name) for name in METRIC_NAMES}
        if self.counts is not None:
            d["counts"] = asdict(self.counts)
        d["degenerate"] = list(self.degenerate)
        return d


def confusion(predictions, labels) -> ConfusionCounts:
    """Counts for boolean predictions (or logits, thresholded at 0) against boolean labels."""
    preds = np.asarray(predictions)
    labels = np.asarray(labels).astype(bool).ravel()
    preds = (preds > 0).ravel() if preds.dtype.kind == "f" else preds.astype(bool).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    if preds.size == 0:
        raise ValueError("confusion needs at least one example")
    return ConfusionCounts(
        tp=int(np.sum(preds & labels)),
        fp=int(np.sum(preds & ~labels)),
        tn=int(np.sum(~preds & ~labels)),
        fn=int(np.sum(~preds & labels)),
    )


def metrics(counts: ConfusionCounts) -> MetricsEntry:
    """Degenerate denominators give 0 and are listed in ``degenerate``."""
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    if counts.total == 0:
        raise ValueError("metrics needs at least one example")
    degenerate = []
    accuracy = (tp + tn) / counts.total
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        degenerate.append("precision")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        degenerate.append("recall")
    # single integer division keeps f1 correctly rounded
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom:
        mcc = (tp * tn - fp * fn) / math.sqrt(denom)
    else:
        mcc = 0.0
        degenerate.append("mcc")
    return MetricsEntry(accuracy, f1, precision, recall, mcc, (mcc + 1) / 2, counts, tuple(degenerate))


@dataclass
class AggregateMetrics:
    mean: dict[str, float]
    std: dict[str, float]
    num_folds: int
    entries: list[MetricsEntry] = field(default_factory=list)

    def formatted(self, name: str) -> str:
        return f"{self.mean[name]:.2f} ± {self.std[name]:.2f}"


def aggregate(entries: Sequence[MetricsEntry | None]) -> AggregateMetrics:
    """Mean and population standard deviation per metric; ``None`` marks a failed fold."""
    ok = [e for e in entries if e is not None]
    if not ok:
        raise ValueError("no successful folds to aggregate")
    mean, std = {}, {}
    for name in METRIC_NAMES:
        values = np.array([getattr(e, name) for e in ok], dtype=np.float64)
        mean[name] = float(values.mean())
        std[name] = float(values.std())
    return AggregateMetrics(mean, std, len(ok), ok)
