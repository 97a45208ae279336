"""Volume containers and the basic aggregation / overlap computations.

Arrays are stored with shape ``(X, Y, Z)`` (``(C, X, Y, Z)`` for probability
stacks).  Flattening in Fortran order therefore makes ``x`` the fastest
varying index, which is the on-disk layout used by :mod:`segqc.io`.

Absent structures are reported as ``None`` ("missing") rather than 0 or 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidVolume, OutOfRange, ProbRequired, ShapeMismatch

Dims = tuple[int, int, int]

PROB_RANGE_TOL = 1e-6
PROB_SUM_TOL = 1e-4


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def _check_dims(shape: Sequence[int]) -> Dims:
    if len(shape) != 3 or any(int(d) < 1 for d in shape):
        raise InvalidVolume(f"expected 3 positive dims, got {tuple(shape)}")
    return tuple(int(d) for d in shape)  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Hard segmentation: one structure label per voxel, 0 is background."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        _check_dims(data.shape)
        if self.num_classes < 2 or self.num_classes > 65536:
            raise InvalidVolume(f"num_classes must be in [2, 65536], got {self.num_classes}")
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.equal(np.mod(data, 1), 0)):
                raise InvalidVolume("labels must be integers")
        if data.size and (data.min() < 0 or data.max() >= self.num_classes):
            raise InvalidVolume(f"labels must lie in [0, {self.num_classes - 1}]")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint16)))

    @property
    def dims(self) -> Dims:
        return self.data.shape  # type: ignore[return-value]

    def mask(self, s: int) -> np.ndarray:
        return self.data == s

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.dims == other.dims
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class ProbStack:
    """Per-class probability volumes of one Monte Carlo sample.

    ``data`` has shape ``(C, X, Y, Z)`` and is stored as float32, the on-disk
    precision.  ``normalized`` is derived: True when every voxel's class
    probabilities sum to 1 within ``PROB_SUM_TOL``.
    """

    data: np.ndarray
    normalized: bool = field(init=False)

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise InvalidVolume(f"probability stack must be 4-D (C, X, Y, Z), got {data.shape}")
        if data.shape[0] < 2:
            raise InvalidVolume("probability stack needs at least 2 classes")
        _check_dims(data.shape[1:])
        if not np.all(np.isfinite(data)):
            raise InvalidVolume("probabilities must be finite")
        if data.min() < -PROB_RANGE_TOL or data.max() > 1 + PROB_RANGE_TOL:
            raise InvalidVolume("probabilities must lie in [0, 1]")
        sums = data.sum(axis=0, dtype=np.float64)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "normalized", bool(np.all(np.abs(sums - 1.0) <= PROB_SUM_TOL)))

    @property
    def dims(self) -> Dims:
        return self.data.shape[1:]  # type: ignore[return-value]

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    def argmax(self) -> LabelVolume:
        # np.argmax returns the first maximum, i.e. the lowest class index on ties
        return LabelVolume(np.argmax(self.data, axis=0), self.num_classes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProbStack):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class IntensityVolume:
    """Non-negative scalar image (the scan being segmented)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        _check_dims(data.shape)
        if not np.all(np.isfinite(data)) or data.min() < 0:
            raise InvalidVolume("intensities must be finite and non-negative")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def dims(self) -> Dims:
        return self.data.shape  # type: ignore[return-value]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IntensityVolume):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self.data, other.data))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class McSampleSet:
    """Ordered Monte Carlo samples for one subject.

    Build it from probability stacks (label volumes are then derived by
    argmax) or from label volumes alone.  Metrics that need probabilities
    raise :class:`ProbRequired` on label-only sets.
    """

    label_volumes: tuple[LabelVolume, ...]
    prob_stacks: tuple[ProbStack, ...] | None = None
    subject_id: str = ""

    def __post_init__(self) -> None:
        labels = tuple(self.label_volumes)
        if not labels:
            raise InvalidVolume("a sample set needs at least one sample")
        dims, n_cls = labels[0].dims, labels[0].num_classes
        for lv in labels:
            if lv.dims != dims or lv.num_classes != n_cls:
                raise ShapeMismatch("all samples must share dims and num_classes")
        object.__setattr__(self, "label_volumes", labels)
        if self.prob_stacks is not None:
            probs = tuple(self.prob_stacks)
            if len(probs) != len(labels):
                raise ShapeMismatch("prob_stacks and label_volumes differ in length")
            for ps, lv in zip(probs, labels):
                if ps.dims != dims or ps.num_classes != n_cls:
                    raise ShapeMismatch("all samples must share dims and num_classes")
                if ps.argmax() != lv:
                    raise InvalidVolume("label volume is not the argmax of its probability stack")
            object.__setattr__(self, "prob_stacks", probs)

    @classmethod
    def from_probs(cls, stacks: Iterable[ProbStack], subject_id: str = "") -> "McSampleSet":
        stacks = tuple(stacks)
        if not stacks:
            raise InvalidVolume("a sample set needs at least one sample")
        dims, n_cls = stacks[0].dims, stacks[0].num_classes
        for ps in stacks:
            if ps.dims != dims or ps.num_classes != n_cls:
                raise ShapeMismatch("all samples must share dims and num_classes")
        obj = cls.__new__(cls)
        # argmax is checked by construction here, skip the redundant verification
        object.__setattr__(obj, "label_volumes", tuple(ps.argmax() for ps in stacks))
        object.__setattr__(obj, "prob_stacks", stacks)
        object.__setattr__(obj, "subject_id", subject_id)
        return obj

    @classmethod
    def from_labels(cls, labels: Iterable[LabelVolume], subject_id: str = "") -> "McSampleSet":
        return cls(tuple(labels), None, subject_id)

    @property
    def n_samples(self) -> int:
        return len(self.label_volumes)

    @property
    def dims(self) -> Dims:
        return self.label_volumes[0].dims

    @property
    def num_classes(self) -> int:
        return self.label_volumes[0].num_classes

    @property
    def has_probs(self) -> bool:
        return self.prob_stacks is not None

    def require_probs(self) -> tuple[ProbStack, ...]:
        if self.prob_stacks is None:
            raise ProbRequired("this operation needs probability stacks, got label volumes only")
        return self.prob_stacks

    def prefix(self, k: int) -> "McSampleSet":
        """The first ``k`` samples, in order."""
        probs = None if self.prob_stacks is None else self.prob_stacks[:k]
        obj = McSampleSet.__new__(McSampleSet)
        object.__setattr__(obj, "label_volumes", self.label_volumes[:k])
        object.__setattr__(obj, "prob_stacks", probs)
        object.__setattr__(obj, "subject_id", self.subject_id)
        return obj


def aggregate_mean_argmax(samples: McSampleSet) -> LabelVolume:
    """Final segmentation: argmax over classes of the mean probability map.

    Ties resolve to the lowest class index.
    """
    stacks = samples.require_probs()
    acc = np.zeros(stacks[0].data.shape, dtype=np.float64)
    for ps in stacks:
        if ps.data.shape != acc.shape:
            raise ShapeMismatch("probability stacks differ in shape")
        acc += ps.data
    acc /= len(stacks)
    return LabelVolume(np.argmax(acc, axis=0), stacks[0].num_classes)


def majority_vote(samples: McSampleSet) -> LabelVolume:
    """Final segmentation of a label-only set: the mean one-hot map's argmax.

    Equivalent to :func:`aggregate_mean_argmax` applied to one-hot stacks,
    so ties also go to the lowest class index.
    """
    votes = np.zeros((samples.num_classes, *samples.dims), dtype=np.int32)
    for lv in samples.label_volumes:
        for s in np.unique(lv.data):
            votes[s] += lv.data == s
    return LabelVolume(np.argmax(votes, axis=0), samples.num_classes)


def _check_pair(a: LabelVolume, b: LabelVolume) -> None:
    if a.dims != b.dims:
        raise ShapeMismatch(f"volume dims differ: {a.dims} vs {b.dims}")


def _check_class(s: int, num_classes: int) -> None:
    if not 0 <= s < num_classes:
        raise OutOfRange(f"class id {s} outside [0, {num_classes - 1}]")


def dice_masks(a: np.ndarray, b: np.ndarray) -> float | None:
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return None
    return 2.0 * int(np.count_nonzero(a & b)) / total


def dice(a: LabelVolume, b: LabelVolume, s: int) -> float | None:
    """Dice overlap of structure ``s`` between two label volumes.

    Returns None when ``s`` is absent from both.
    """
    _check_pair(a, b)
    _check_class(s, max(a.num_classes, b.num_classes))
    return dice_masks(a.data == s, b.data == s)


def mean_dice_over_structures(a: LabelVolume, b: LabelVolume, structures: Sequence[int]) -> float | None:
    if not structures:
        raise ValueError("structures must be non-empty")
    _check_pair(a, b)
    scores = [d for s in structures if (d := dice(a, b, s)) is not None]
    if not scores:
        return None
    return float(np.mean(scores))


def structure_volume(v: LabelVolume, s: int) -> int:
    """Voxel count of structure ``s``."""
    _check_class(s, v.num_classes)
    return int(np.count_nonzero(v.data == s))
