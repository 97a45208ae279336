"""Reference-based evaluation and the IoU-as-Dice-proxy protocol."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateInput, EmptyInput, OutOfRange
from .uncertainty import StructureMetrics

METRIC_NAMES = ("cv", "dmc", "iou", "mean_entropy")


class QualityClass(enum.IntEnum):
    """Dice bands: bad [0, 0.6), medium [0.6, 0.8), good [0.8, 1]."""

    BAD = 0
    MEDIUM = 1
    GOOD = 2

    @property
    def label(self) -> str:
        return self.name.lower()


def classify(d: float) -> QualityClass:
    if d is None or not (0.0 <= d <= 1.0):
        raise OutOfRange(f"score must lie in [0, 1], got {d!r}")
    if d < 0.6:
        return QualityClass.BAD
    if d < 0.8:
        return QualityClass.MEDIUM
    return QualityClass.GOOD


@dataclass(frozen=True)
class EvalRecord:
    subject_id: str
    structure: int
    dice_vs_truth: float | None
    metrics: StructureMetrics

    def metric(self, name: str) -> float | None:
        if name not in METRIC_NAMES:
            raise ValueError(f"unknown metric {name!r}, expected one of {METRIC_NAMES}")
        return getattr(self.metrics, name)


def pearson(x: Sequence[float | None], y: Sequence[float | None]) -> float:
    """Pearson correlation after dropping pairs with a missing side."""
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    pairs = [(a, b) for a, b in zip(x, y) if a is not None and b is not None]
    if len(pairs) < 2:
        raise DegenerateInput(f"need at least 2 complete pairs, got {len(pairs)}")
    xa = np.array([p[0] for p in pairs], dtype=np.float64)
    ya = np.array([p[1] for p in pairs], dtype=np.float64)
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInput("constant series has no correlation")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _iou_dice_pairs(records: Iterable[EvalRecord]) -> list[tuple[float, float]]:
    return [
        (r.metrics.iou, r.dice_vs_truth)
        for r in records
        if r.metrics.iou is not None and r.dice_vs_truth is not None
    ]


def iou_proxy_mae(records: Iterable[EvalRecord]) -> float:
    pairs = _iou_dice_pairs(records)
    if not pairs:
        raise EmptyInput("no record has both IoU and Dice")
    return float(np.mean([abs(i - d) for i, d in pairs]))


def proxy_accuracy(records: Iterable[EvalRecord]) -> float:
    """Fraction of records whose IoU band matches their Dice band."""
    pairs = _iou_dice_pairs(records)
    if not pairs:
        raise EmptyInput("no record has both IoU and Dice")
    return sum(classify(i) == classify(d) for i, d in pairs) / len(pairs)


def correlation_report(records: Sequence[EvalRecord], metric: str) -> float:
    """Pooled correlation of one metric with Dice, one point per (subject, structure)."""
    return pearson([r.metric(metric) for r in records], [r.dice_vs_truth for r in records])


def correlation_by_structure(records: Sequence[EvalRecord], metric: str) -> dict[int, float | None]:
    """Per-structure correlations; None where a structure's series is degenerate."""
    out: dict[int, float | None] = {}
    for s in sorted({r.structure for r in records}):
        subset = [r for r in records if r.structure == s]
        try:
            out[s] = correlation_report(subset, metric)
        except DegenerateInput:
            out[s] = None
    return out


def scatter_pairs(records: Iterable[EvalRecord], metric: str) -> list[dict]:
    """Plot-ready (metric, dice) points."""
    return [
        {"subject_id": r.subject_id, "structure": r.structure, "metric": metric, "value": r.metric(metric), "dice": r.dice_vs_truth}
        for r in records
    ]
