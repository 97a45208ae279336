"""Synthetic phantoms and a Monte Carlo segmentation sampler.

The sampler replaces a Bayesian segmentation network.  Each class score is a
negative signed distance to the true structure, perturbed by a smooth random
displacement field, plus a Gaussian intensity log-likelihood::

    score_c = -(sd_c + rho * D_ic) / (tau * rho) + lam * G_i * L_c

``D_ic`` is trilinearly interpolated from a coarse coefficient grid.  Its
coefficients are a subject-level systematic part plus a part whose entries are
Bernoulli-dropped (inverted dropout, rate ``r``) independently per sample.
The intensity gain ``G_i`` is the same kind of coarse field built from a
dropped all-ones grid, so input noise is amplified differently per sample.
Distances are expressed in units of ``rho``, so
``rho -> 0`` is the exact, certain segmentation and larger ``rho`` both
blurs and perturbs it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import GeometryOverflow, ShapeMismatch
from .io import CohortRow
from .volume import IntensityVolume, LabelVolume, McSampleSet, ProbStack, aggregate_mean_argmax

DEFAULT_FRACTIONS = (0.05, 0.035, 0.025, 0.02, 0.015, 0.02, 0.01)
PLACEMENT_ATTEMPTS = 25


def _default_means(k: int) -> tuple[float, ...]:
    # low contrast (~1.2% of the image RMS) so that the dB noise grid matters;
    # inner structures never touch the background, so reusing its level is harmless
    inner = [1.0 if j % 2 == 0 else 1.024 for j in range(k - 1)]
    return (1.0, 1.012, *inner)


@dataclass(frozen=True)
class PhantomSpec:
    """Nested ellipsoid phantom: structure 1 is an outer shell, 2..K sit inside it.

    ``volume_fractions`` gives the inner structures' share of the outer
    ellipsoid (the intra-cranial volume); structure 1 gets the remainder.
    """

    dims: tuple[int, int, int] = (32, 32, 32)
    num_structures: int = 4
    seed: int = 0
    volume_fractions: tuple[float, ...] | None = None
    intensity_means: tuple[float, ...] | None = None
    texture_std: float = 0.002
    outer_extent: float = 0.42
    jitter: float = 0.03

    def fractions(self) -> tuple[float, ...]:
        if self.volume_fractions is not None:
            if len(self.volume_fractions) != self.num_structures - 1:
                raise ValueError("volume_fractions needs one entry per inner structure")
            return tuple(self.volume_fractions)
        if self.num_structures - 1 > len(DEFAULT_FRACTIONS):
            raise ValueError(f"at most {len(DEFAULT_FRACTIONS) + 1} structures without explicit fractions")
        return DEFAULT_FRACTIONS[: self.num_structures - 1]

    def means(self) -> tuple[float, ...]:
        if self.intensity_means is not None:
            if len(self.intensity_means) != self.num_structures + 1:
                raise ValueError("intensity_means needs one entry per class, background first")
            return tuple(self.intensity_means)
        return _default_means(self.num_structures)


def _ellipsoid(grid: np.ndarray, center: np.ndarray, axes: np.ndarray) -> np.ndarray:
    q = sum(((grid[i] - center[i]) / axes[i]) ** 2 for i in range(3))
    return q <= 1.0


def _place_inner(grid, rng, spec, center, outer, outer_axes, fractions):
    """One placement attempt; returns ``(labels, "")`` or ``(None, reason)``.

    Up to four inner structures sit on one ring, alternating above and below
    the mid-plane.  More are split over two interleaved rings further apart.
    """
    labels = np.zeros(spec.dims, dtype=np.int64)
    labels[outer] = 1
    outer_volume = 4.0 / 3.0 * math.pi * np.prod(outer_axes)
    k_inner = len(fractions)
    per_ring = math.ceil(k_inner / 2)
    phase = rng.uniform(0, 2 * math.pi)
    for j, frac in enumerate(fractions):
        shape = np.array([1.0, 0.85, 0.9]) * (1 + rng.uniform(-spec.jitter, spec.jitter, 3))
        scale = (frac * outer_volume / (4.0 / 3.0 * math.pi * np.prod(shape))) ** (1 / 3)
        axes = shape * scale
        if k_inner == 1:
            offset = np.zeros(3)
        elif k_inner <= 4:
            theta = phase + 2 * math.pi * j / k_inner
            offset = 0.5 * outer_axes * np.array([math.cos(theta), math.sin(theta), 0.3 * (-1) ** j])
        else:
            theta = phase + 2 * math.pi * (j // 2) / per_ring + (j % 2) * math.pi / per_ring
            offset = 0.5 * outer_axes * np.array([math.cos(theta), math.sin(theta), 0.6 * (-1) ** j])
        m = _ellipsoid(grid, center + offset, axes)
        if np.any(m & ~outer):
            return None, f"structure {j + 2} leaves the outer shell"
        if np.any(labels[m] > 1):
            return None, f"structure {j + 2} overlaps another structure"
        labels[m] = j + 2
    return labels, ""


def make_phantom(spec: PhantomSpec) -> tuple[LabelVolume, IntensityVolume]:
    if spec.num_structures < 2:
        raise ValueError("need at least 2 structures")
    rng = np.random.default_rng(spec.seed)
    dims = np.array(spec.dims, dtype=np.float64)
    grid = np.indices(spec.dims, dtype=np.float64)

    center = (dims - 1) / 2 + rng.uniform(-0.5, 0.5, 3)
    outer_axes = spec.outer_extent * dims * (1 + rng.uniform(-spec.jitter, spec.jitter, 3))
    if np.any(center - outer_axes < 0) or np.any(center + outer_axes > dims - 1):
        raise GeometryOverflow("outer ellipsoid does not fit in the volume")
    outer = _ellipsoid(grid, center, outer_axes)

    fractions = spec.fractions()
    if any(f <= 0 for f in fractions):
        raise GeometryOverflow("inner structures need positive volume fractions")
    labels, problem = None, ""
    for _ in range(PLACEMENT_ATTEMPTS):
        labels, problem = _place_inner(grid, rng, spec, center, outer, outer_axes, fractions)
        if labels is not None:
            break
    if labels is None:
        raise GeometryOverflow(problem)

    for s in range(1, spec.num_structures + 1):
        if not np.any(labels == s):
            raise GeometryOverflow(f"structure {s} is empty at dims {spec.dims}")

    means = np.asarray(spec.means())
    img = means[labels]
    if spec.texture_std > 0:
        img = img + rng.normal(0.0, spec.texture_std, spec.dims)
    truth = LabelVolume(labels, spec.num_structures + 1)
    return truth, IntensityVolume(np.clip(img, 0.0, None))


def signed_distance_maps(truth: LabelVolume) -> np.ndarray:
    """Per class: negative inside, positive outside, +-0.5 on either side of the boundary."""
    out = np.empty((truth.num_classes, *truth.dims), dtype=np.float64)
    for c in range(truth.num_classes):
        m = truth.data == c
        if not m.any():
            out[c] = np.inf
            continue
        if m.all():
            out[c] = -np.inf
            continue
        inside = ndimage.distance_transform_edt(m)
        outside = ndimage.distance_transform_edt(~m)
        out[c] = np.where(m, 0.5 - inside, outside - 0.5)
    return out


def class_means(img: IntensityVolume, truth: LabelVolume) -> np.ndarray:
    return np.array(
        [float(np.median(img.data[truth.data == c])) if np.any(truth.data == c) else 0.0 for c in range(truth.num_classes)]
    )


@dataclass(frozen=True)
class SamplerSpec:
    """Monte Carlo sampler settings.

    ``rho`` is the perturbation amplitude in voxels, ``dropout`` the Bernoulli
    drop rate.  ``jitter`` scales the dropout-masked part of the displacement
    relative to the systematic part.
    """

    n_samples: int = 15
    rho: float = 1.0
    temperature: float = 1.0
    dropout: float = 0.2
    seed: int = 0
    grid: int = 6
    jitter: float = 0.3
    intensity_weight: float = 0.5
    intensity_std: float = 0.012

    def __post_init__(self) -> None:
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.rho < 0 or self.temperature <= 0:
            raise ValueError("rho must be >= 0 and temperature > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.grid < 2:
            raise ValueError("grid must be >= 2")


def _interp_matrix(n: int, g: int) -> np.ndarray:
    # linear interpolation weights from g coarse nodes spanning [0, n-1] onto n voxels
    pos = np.linspace(0.0, g - 1.0, n)
    lo = np.clip(np.floor(pos).astype(int), 0, g - 2)
    frac = pos - lo
    w = np.zeros((n, g))
    w[np.arange(n), lo] = 1 - frac
    w[np.arange(n), lo + 1] = frac
    return w


def upsample_trilinear(coef: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Trilinear interpolation of ``(..., g, g, g)`` coefficients onto ``dims``."""
    wx, wy, wz = (_interp_matrix(n, g) for n, g in zip(dims, coef.shape[-3:]))
    return np.einsum("...abc,xa,yb,zc->...xyz", coef, wx, wy, wz, optimize=True)


def _softmax(scores: np.ndarray) -> np.ndarray:
    scores = scores - scores.max(axis=0, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=0, keepdims=True)
    return scores


def iter_mc_samples(
    img: IntensityVolume,
    distance_maps: np.ndarray,
    spec: SamplerSpec,
    means: Sequence[float] | None = None,
) -> Iterator[ProbStack]:
    """Yield the probability stacks one at a time (bounded memory)."""
    n_cls = distance_maps.shape[0]
    dims = img.dims
    if distance_maps.shape[1:] != dims:
        raise ShapeMismatch(f"distance maps {distance_maps.shape[1:]} vs image {dims}")

    if spec.rho == 0:
        # limit of the model: every sample is the certain, exact segmentation
        onehot = (np.argmin(distance_maps, axis=0)[None] == np.arange(n_cls)[:, None, None, None])
        stack = ProbStack(onehot.astype(np.float32))
        for _ in range(spec.n_samples):
            yield stack
        return

    if means is None:
        means = [float(np.median(img.data[distance_maps[c] < 0])) if np.any(distance_maps[c] < 0) else 0.0 for c in range(n_cls)]
    means = np.asarray(means, dtype=np.float64)[:, None, None, None]

    rng = np.random.default_rng(spec.seed)
    g = spec.grid
    systematic = rng.standard_normal((n_cls, g, g, g))
    droppable = spec.jitter * rng.standard_normal((n_cls, g, g, g))
    keep = 1.0 - spec.dropout
    base_field = upsample_trilinear(systematic, dims)
    image = img.data.astype(np.float64)
    geom_scale = 1.0 / (spec.temperature * spec.rho)
    loglik = -((image[None] - means) ** 2) / (2 * spec.intensity_std**2)

    for _ in range(spec.n_samples):
        mask = rng.random((n_cls, g, g, g)) < keep
        field_i = base_field + upsample_trilinear(droppable * mask / keep, dims)

        gain = upsample_trilinear((rng.random((g, g, g)) < keep) / keep, dims)
        scores = -(distance_maps + spec.rho * field_i) * geom_scale + (spec.intensity_weight * gain) * loglik
        yield ProbStack(_softmax(scores).astype(np.float32))


def mc_segment(
    img: IntensityVolume,
    distance_maps: np.ndarray,
    spec: SamplerSpec,
    means: Sequence[float] | None = None,
    subject_id: str = "",
) -> McSampleSet:
    return McSampleSet.from_probs(iter_mc_samples(img, distance_maps, spec, means), subject_id=subject_id)


# ---------------------------------------------------------------------------
# cohorts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovariateModel:
    """Planted linear effects on the inner structures' ICV fractions.

    ``beta_age`` and ``beta_diagnosis`` have one entry per inner structure
    (labels 2..K); structure 1 absorbs the remainder so fractions sum to 1.
    """

    base_fractions: tuple[float, ...] = (0.058, 0.043, 0.033)
    beta_age: tuple[float, ...] = (-1e-4, -1e-4, -1e-4)
    beta_diagnosis: tuple[float, ...] = (-0.008, 0.0, 0.004)
    noise_std: float = 0.003
    age_range: tuple[float, float] = (20.0, 80.0)
    p_diagnosis: float = 0.5
    sites: tuple[str, ...] = ("site0",)
    site_offsets: tuple[float, ...] | None = None

    @property
    def num_structures(self) -> int:
        return len(self.base_fractions) + 1

    def planted(self) -> dict[str, dict[str, float]]:
        """Planted coefficients per structure label (as strings)."""
        out = {
            "1": {"age": -sum(self.beta_age), "diagnosis": -sum(self.beta_diagnosis)},
        }
        for j, (ba, bd) in enumerate(zip(self.beta_age, self.beta_diagnosis)):
            out[str(j + 2)] = {"age": ba, "diagnosis": bd}
        return out


@dataclass(frozen=True)
class SubjectDraw:
    subject_id: str
    index: int
    age: float
    sex: int
    diagnosis: int
    site: str
    rho: float
    fractions: tuple[float, ...]
    phantom_seed: int
    sampler_seed: int


def _subject_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, index]))


def draw_subject(
    index: int,
    master_seed: int,
    model: CovariateModel,
    rho_range: tuple[float, float],
    corrupt_fraction: float = 0.0,
    corrupt_rho_range: tuple[float, float] = (2.5, 3.5),
) -> SubjectDraw:
    """Covariates, target volumes and seeds of subject ``index``.

    Depends only on ``(master_seed, index)``, never on cohort size or order.
    """
    rng = _subject_rng(master_seed, index)
    age = float(rng.uniform(*model.age_range))
    sex = int(rng.random() < 0.5)
    diagnosis = int(rng.random() < model.p_diagnosis)
    site_idx = int(rng.integers(len(model.sites)))
    rho = float(rng.uniform(*rho_range))
    if rng.random() < corrupt_fraction:
        rho = float(rng.uniform(*corrupt_rho_range))
    offset = 0.0 if model.site_offsets is None else model.site_offsets[site_idx]
    fracs = []
    for base, ba, bd in zip(model.base_fractions, model.beta_age, model.beta_diagnosis):
        v = base + ba * age + bd * diagnosis + offset + rng.normal(0.0, model.noise_std)
        fracs.append(max(v, 1e-3))
    phantom_seed, sampler_seed = (int(x) for x in rng.integers(0, 2**63 - 1, size=2))
    return SubjectDraw(
        subject_id=f"sub-{index:04d}",
        index=index,
        age=age,
        sex=sex,
        diagnosis=diagnosis,
        site=model.sites[site_idx],
        rho=rho,
        fractions=tuple(fracs),
        phantom_seed=phantom_seed,
        sampler_seed=sampler_seed,
    )


def icv_fractions(seg: LabelVolume) -> dict[str, float]:
    """Structure voxel counts over the non-background voxel count."""
    counts = np.bincount(seg.data.ravel(), minlength=seg.num_classes)
    icv = counts[1:].sum()
    return {str(s): (float(counts[s] / icv) if icv else 0.0) for s in range(1, seg.num_classes)}


@dataclass(eq=False)
class SimulatedSubject:
    draw: SubjectDraw
    truth: LabelVolume
    image: IntensityVolume
    samples: McSampleSet

    def final_segmentation(self) -> LabelVolume:
        return aggregate_mean_argmax(self.samples)

    def row(self, volumes: dict[str, float]) -> CohortRow:
        d = self.draw
        return CohortRow(d.subject_id, d.age, d.sex, d.diagnosis, d.site, volumes)


def simulate_subject(
    draw: SubjectDraw,
    dims: tuple[int, int, int] = (32, 32, 32),
    sampler: SamplerSpec | None = None,
    phantom: PhantomSpec | None = None,
) -> SimulatedSubject:
    phantom = phantom or PhantomSpec()
    spec = replace(
        phantom, dims=dims, num_structures=len(draw.fractions) + 1, seed=draw.phantom_seed, volume_fractions=draw.fractions
    )
    truth, img = make_phantom(spec)
    sampler = replace(sampler or SamplerSpec(), rho=draw.rho, seed=draw.sampler_seed)
    samples = mc_segment(img, signed_distance_maps(truth), sampler, means=spec.means(), subject_id=draw.subject_id)
    return SimulatedSubject(draw, truth, img, samples)


@dataclass(eq=False)
class SimulatedCohort:
    samples: list[McSampleSet]
    truths: list[LabelVolume]
    images: list[IntensityVolume]
    table: list[CohortRow]
    truth_table: list[CohortRow]
    draws: list[SubjectDraw]
    planted: dict[str, dict[str, float]] = field(default_factory=dict)


def cohort_generate(
    n_subjects: int,
    rho_range: tuple[float, float] = (0.2, 3.0),
    model: CovariateModel | None = None,
    seed: int = 0,
    dims: tuple[int, int, int] = (32, 32, 32),
    sampler: SamplerSpec | None = None,
    corrupt_fraction: float = 0.0,
    corrupt_rho_range: tuple[float, float] = (2.5, 3.5),
) -> SimulatedCohort:
    """Simulate a whole cohort in memory.

    ``table`` holds volumes measured on the MC segmentation, ``truth_table``
    those of the phantom ground truth.  For large cohorts prefer
    :func:`draw_subject` + :func:`simulate_subject` one subject at a time.
    """
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    model = model or CovariateModel()
    out = SimulatedCohort([], [], [], [], [], [], model.planted())
    for i in range(n_subjects):
        draw = draw_subject(i, seed, model, rho_range, corrupt_fraction, corrupt_rho_range)
        sub = simulate_subject(draw, dims, sampler)
        out.draws.append(draw)
        out.samples.append(sub.samples)
        out.truths.append(sub.truth)
        out.images.append(sub.image)
        out.table.append(sub.row(icv_fractions(sub.final_segmentation())))
        out.truth_table.append(sub.row(icv_fractions(sub.truth)))
    return out
