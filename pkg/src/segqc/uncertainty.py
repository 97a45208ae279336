"""Voxel-wise entropy and structure-wise uncertainty from Monte Carlo samples.

Four structure-wise metrics are provided:

* ``cv_volume``      coefficient of variation of the structure volume
* ``pairwise_dice``  mean Dice over all unordered sample pairs
* ``mc_iou``         N-way intersection over N-way union
* ``mean_structure_entropy``  mean global entropy inside the final label

The voxel-wise entropy sums ``-p log p`` over the *samples* (natural log),
it is not the entropy of the mean distribution.  Pass ``normalize=True`` to
divide by the number of samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy.special import entr

from .errors import CountOutOfRange, InsufficientSamples, ShapeMismatch
from .volume import LabelVolume, McSampleSet, aggregate_mean_argmax


@dataclass(frozen=True, eq=False)
class EntropyVolume:
    """Global entropy map ``total`` and, optionally, the per-class maps."""

    total: np.ndarray
    n_samples: int
    per_structure: np.ndarray | None = None
    normalized: bool = False

    @property
    def dims(self):
        return self.total.shape

    def structure(self, s: int) -> np.ndarray:
        if self.per_structure is None:
            raise ValueError("per-structure maps were not materialised")
        return self.per_structure[s]


@dataclass(frozen=True)
class StructureMetrics:
    structure: int
    cv: float | None
    dmc: float | None
    iou: float | None
    mean_entropy: float | None
    mean_volume: float
    volume_std: float


@dataclass(frozen=True)
class StabilityTransition:
    from_n: int
    to_n: int
    mean_abs_change: float


# ---------------------------------------------------------------------------
# voxel-wise entropy
# ---------------------------------------------------------------------------


def voxel_entropy(samples: McSampleSet, s: int, normalize: bool = False) -> np.ndarray:
    """Per-voxel ``-sum_i P_i^s log P_i^s`` for class ``s``.

    Stacks are consumed one at a time, so only one extra volume is held.
    """
    stacks = samples.require_probs()
    acc = np.zeros(samples.dims, dtype=np.float64)
    for ps in stacks:
        acc += entr(ps.data[s].astype(np.float64))
    if normalize:
        acc /= len(stacks)
    return acc


def _sample_entropy(data: np.ndarray) -> np.ndarray:
    # sum over classes of -p log p for one probability stack, shape (X, Y, Z)
    return entr(data.astype(np.float64)).sum(axis=0)


def global_entropy(samples: McSampleSet, normalize: bool = False, keep_structures: bool = False) -> EntropyVolume:
    """Global map ``U = sum_s U_s`` over every class, background included."""
    stacks = samples.require_probs()
    n = len(stacks)
    if keep_structures:
        per = np.zeros((samples.num_classes, *samples.dims), dtype=np.float64)
        for ps in stacks:
            per += entr(ps.data.astype(np.float64))
        if normalize:
            per /= n
        total = per.sum(axis=0)
    else:
        per = None
        total = np.zeros(samples.dims, dtype=np.float64)
        for ps in stacks:
            total += _sample_entropy(ps.data)
        if normalize:
            total /= n
    total.setflags(write=False)
    return EntropyVolume(total=total, n_samples=n, per_structure=per, normalized=normalize)


def entropy_upper_bound(n_samples: int, normalize: bool = False) -> float:
    """Largest value a single-class entropy map can take (``-p log p <= 1/e``)."""
    return (1.0 if normalize else n_samples) / math.e


# ---------------------------------------------------------------------------
# structure-wise metrics
# ---------------------------------------------------------------------------


def _need_pairs(samples: McSampleSet) -> None:
    if samples.n_samples < 2:
        raise InsufficientSamples(f"need at least 2 MC samples, got {samples.n_samples}")


def _masks(samples: McSampleSet, s: int) -> np.ndarray:
    return np.stack([lv.data.ravel() == s for lv in samples.label_volumes])


def sample_volumes(samples: McSampleSet, s: int) -> np.ndarray:
    return np.array([np.count_nonzero(lv.data == s) for lv in samples.label_volumes], dtype=np.int64)


def cv_volume(samples: McSampleSet, s: int) -> float | None:
    """Volume std (N-1 denominator) over volume mean; None if never present."""
    _need_pairs(samples)
    vols = sample_volumes(samples, s).astype(np.float64)
    mu = vols.mean()
    if mu == 0:
        return None
    return float(vols.std(ddof=1) / mu)


def pairwise_dice(samples: McSampleSet, s: int) -> float | None:
    """Mean Dice over the N(N-1)/2 unordered sample pairs, missing pairs skipped."""
    _need_pairs(samples)
    m = _masks(samples, s).astype(np.float64)
    inter = m @ m.T
    sizes = np.diag(inter)
    scores = []
    for i, j in combinations(range(samples.n_samples), 2):
        total = sizes[i] + sizes[j]
        if total > 0:
            scores.append(2.0 * inter[i, j] / total)
    if not scores:
        return None
    return float(np.mean(scores))


def mc_iou(samples: McSampleSet, s: int) -> float | None:
    """|intersection of all sample masks| / |union of all sample masks|."""
    _need_pairs(samples)
    m = _masks(samples, s)
    union = np.count_nonzero(m.any(axis=0))
    if union == 0:
        return None
    return np.count_nonzero(m.all(axis=0)) / union


def mean_structure_entropy(
    samples: McSampleSet,
    final_seg: LabelVolume,
    s: int,
    entropy: EntropyVolume | None = None,
) -> float | None:
    """Mean of the global entropy map over voxels where ``final_seg == s``."""
    if final_seg.dims != samples.dims:
        raise ShapeMismatch(f"final segmentation dims {final_seg.dims} != sample dims {samples.dims}")
    if entropy is None:
        entropy = global_entropy(samples)
    region = final_seg.data == s
    if not region.any():
        return None
    return float(entropy.total[region].mean())


def structure_metrics(
    samples: McSampleSet,
    structures: Sequence[int] | None = None,
    final_seg: LabelVolume | None = None,
) -> list[StructureMetrics]:
    """All four metrics for each structure (default: every non-background class).

    The entropy metric is None for label-only sample sets.
    """
    _need_pairs(samples)
    if structures is None:
        structures = range(1, samples.num_classes)
    entropy = None
    if samples.has_probs:
        entropy = global_entropy(samples)
        if final_seg is None:
            final_seg = aggregate_mean_argmax(samples)
    out = []
    for s in structures:
        vols = sample_volumes(samples, s).astype(np.float64)
        out.append(
            StructureMetrics(
                structure=int(s),
                cv=cv_volume(samples, s),
                dmc=pairwise_dice(samples, s),
                iou=mc_iou(samples, s),
                mean_entropy=None if entropy is None else mean_structure_entropy(samples, final_seg, s, entropy),
                mean_volume=float(vols.mean()),
                volume_std=float(vols.std(ddof=1)),
            )
        )
    return out


# ---------------------------------------------------------------------------
# sample-count stability
# ---------------------------------------------------------------------------


def entropy_stability(
    samples: McSampleSet,
    counts: Sequence[int],
    normalize: bool = True,
) -> list[StabilityTransition]:
    """Mean absolute change of the global entropy map between sample counts.

    ``U_k`` is built from the first ``k`` samples.  With the default
    ``normalize=True`` each map is divided by its sample count; the raw sum
    grows linearly with ``k`` so its consecutive differences measure the
    added samples rather than convergence.
    """
    stacks = samples.require_probs()
    counts = [int(c) for c in counts]
    if len(counts) < 2:
        raise CountOutOfRange("need at least two sample counts")
    if counts[0] < 1 or any(b <= a for a, b in zip(counts, counts[1:])):
        raise CountOutOfRange(f"counts must be positive and strictly increasing, got {counts}")
    if counts[-1] > len(stacks):
        raise CountOutOfRange(f"count {counts[-1]} exceeds the {len(stacks)} available samples")

    wanted = set(counts)
    running = np.zeros(samples.dims, dtype=np.float64)
    prev: tuple[int, np.ndarray] | None = None
    out = []
    for k, ps in enumerate(stacks[: counts[-1]], start=1):
        running += _sample_entropy(ps.data)
        if k not in wanted:
            continue
        current = running / k if normalize else running.copy()
        if prev is not None:
            out.append(StabilityTransition(prev[0], k, float(np.mean(np.abs(current - prev[1])))))
        prev = (k, current)
    return out
