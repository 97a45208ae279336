"""Uncertainty-weighted linear regression for group analyses.

The model regresses an ICV-normalised structure volume on
``[1, age, sex, diagnosis]`` (plus one-hot site columns when the cohort has
more than one site), weighting each subject by a structure-wise confidence
derived from its Monte Carlo metrics.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg
from scipy.special import betainc

from .errors import InsufficientData, RankDeficient
from .io import CohortRow
from .uncertainty import StructureMetrics

log = logging.getLogger(__name__)

WEIGHT_CAP = 1e6
WEIGHT_FLOOR = 1e-9
BASE_COLUMNS = ("intercept", "age", "sex", "diagnosis")


class WeightScheme(str, enum.Enum):
    UNIFORM = "uniform"
    INV_CV = "invcv"
    INV_ONE_MINUS_DMC = "invdmc"
    IOU = "iou"

    @property
    def metric(self) -> str | None:
        return {"uniform": None, "invcv": "cv", "invdmc": "dmc", "iou": "iou"}[self.value]


def weights_from_metrics(
    metrics: Sequence[StructureMetrics | None],
    scheme: WeightScheme | str,
    cap: float = WEIGHT_CAP,
    floor: float = WEIGHT_FLOOR,
) -> list[float | None]:
    """Per-subject weights; None marks a subject whose metric is missing.

    ``1/CV`` and ``1/(1 - dMC)`` are undefined for a perfectly stable
    structure, so denominators are floored and weights capped.
    """
    scheme = WeightScheme(scheme)
    out: list[float | None] = []
    for i, m in enumerate(metrics):
        if scheme is WeightScheme.UNIFORM:
            out.append(1.0)
            continue
        value = None if m is None else getattr(m, scheme.metric)
        if value is None:
            log.warning("subject %d: %s missing, excluded from %s weighting", i, scheme.metric, scheme.value)
            out.append(None)
            continue
        if scheme is WeightScheme.INV_CV:
            w = 1.0 / max(value, floor)
        elif scheme is WeightScheme.INV_ONE_MINUS_DMC:
            w = 1.0 / max(1.0 - value, floor)
        else:
            w = float(value)
        out.append(min(max(w, 0.0), cap))
    return out


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    matrix: np.ndarray
    columns: tuple[str, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape  # type: ignore[return-value]


def build_design(rows: Sequence[CohortRow]) -> DesignMatrix:
    """``[1, age, sex, diagnosis]`` plus site one-hots; the first sorted site is the reference."""
    base = np.array([[1.0, r.age, r.sex, r.diagnosis] for r in rows], dtype=np.float64).reshape(len(rows), 4)
    sites = sorted({r.site for r in rows})
    columns = list(BASE_COLUMNS)
    if len(sites) > 1:
        onehot = np.array([[float(r.site == s) for s in sites[1:]] for r in rows])
        base = np.hstack([base, onehot])
        columns += [f"site[{s}]" for s in sites[1:]]
    return DesignMatrix(base, tuple(columns))


@dataclass(frozen=True, eq=False)
class RegressionResult:
    beta: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    dof: int
    columns: tuple[str, ...]
    scheme: str = WeightScheme.UNIFORM.value
    residuals: np.ndarray | None = None

    def coef(self, name: str) -> dict[str, float]:
        i = self.columns.index(name)
        return {"beta": float(self.beta[i]), "se": float(self.se[i]), "t": float(self.t[i]), "p": float(self.p[i])}

    @property
    def beta_d(self) -> float:
        return float(self.beta[self.columns.index("diagnosis")])

    @property
    def p_d(self) -> float:
        return float(self.p[self.columns.index("diagnosis")])


def t_two_sided_p(t: np.ndarray | float, dof: float) -> np.ndarray:
    """Two-sided Student-t p-value via the regularised incomplete beta function."""
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        x = np.where(np.isinf(t), 0.0, dof / (dof + t2))
        # for small |t|, x rounds towards 1; use the complement 1 - x = t²/(dof + t²)
        small = np.where(np.isinf(t), 1.0, t2 / (dof + t2))
    p = np.where(t2 < dof, 1.0 - betainc(0.5, 0.5 * dof, small), betainc(0.5 * dof, 0.5, x))
    return np.clip(p, 0.0, 1.0)


def wls_fit(
    X: DesignMatrix | np.ndarray,
    y: Sequence[float] | np.ndarray,
    weights: Sequence[float] | np.ndarray | None = None,
    scheme: WeightScheme | str = WeightScheme.UNIFORM,
) -> RegressionResult:
    """Weighted least squares through the Cholesky-factored normal equations.

    Residual degrees of freedom count only rows with positive weight.
    A coefficient with zero standard error gets ``t = ±inf`` (``0`` when the
    coefficient itself is 0).
    """
    if isinstance(X, DesignMatrix):
        columns, Xm = X.columns, X.matrix
    else:
        Xm = np.asarray(X, dtype=np.float64)
        columns = tuple(f"x{i}" for i in range(Xm.shape[1]))
    Xm = np.asarray(Xm, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = Xm.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if y.shape != (n,) or w.shape != (n,):
        raise ValueError(f"X has {n} rows but y has shape {y.shape} and weights {w.shape}")
    if not (np.all(np.isfinite(Xm)) and np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
        raise ValueError("design, response and weights must be finite")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")

    n_pos = int(np.count_nonzero(w > 0))
    if n <= k or n_pos <= k:
        raise InsufficientData(f"{n_pos} positively weighted rows for {k} coefficients")
    sw = np.sqrt(w)
    if np.linalg.matrix_rank(Xm * sw[:, None]) < k:
        raise RankDeficient("weighted design matrix is not of full column rank")

    XtW = Xm.T * w
    A = XtW @ Xm
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise RankDeficient(f"normal matrix is not positive definite: {exc}") from exc
    beta = linalg.cho_solve(factor, XtW @ y, check_finite=False)

    resid = y - Xm @ beta
    dof = n_pos - k
    sigma2 = float(np.sum(w * resid * resid)) / dof
    cov = sigma2 * linalg.cho_solve(factor, np.eye(k), check_finite=False)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / np.where(se > 0, se, 1.0), np.where(beta == 0, 0.0, np.sign(beta) * np.inf))
    p = t_two_sided_p(t, dof)
    return RegressionResult(
        beta=beta, se=se, t=t, p=p, dof=dof, columns=tuple(columns),
        scheme=WeightScheme(scheme).value, residuals=resid,
    )


@dataclass(frozen=True, eq=False)
class GroupResult:
    structure: str
    scheme: str
    regression: RegressionResult
    subject_ids: tuple[str, ...]
    weights: np.ndarray
    excluded: tuple[str, ...] = field(default_factory=tuple)

    @property
    def n_used(self) -> int:
        return len(self.subject_ids)

    @property
    def n_excluded(self) -> int:
        return len(self.excluded)

    def as_row(self) -> dict:
        d = self.regression.coef("diagnosis")
        return {
            "structure": self.structure,
            "scheme": self.scheme,
            "beta_D": d["beta"],
            "se_D": d["se"],
            "t_D": d["t"],
            "p_D": d["p"],
            "n_used": self.n_used,
            "n_excluded": self.n_excluded,
        }


def group_analysis(
    rows: Sequence[CohortRow],
    structure: str | int,
    scheme: WeightScheme | str = WeightScheme.UNIFORM,
    metrics: Mapping[str, StructureMetrics] | None = None,
    cap: float = WEIGHT_CAP,
    floor: float = WEIGHT_FLOOR,
) -> GroupResult:
    """Fit the volume of ``structure`` on age, sex, diagnosis (and site).

    ``metrics`` maps subject id to that subject's metrics for the structure.
    Subjects lacking the volume or the metric the scheme needs are excluded
    and listed in the result.
    """
    structure = str(structure)
    scheme = WeightScheme(scheme)
    if scheme is not WeightScheme.UNIFORM and metrics is None:
        raise ValueError(f"scheme {scheme.value!r} needs structure metrics")

    with_volume = [r for r in rows if structure in r.volumes]
    excluded = [r.subject_id for r in rows if structure not in r.volumes]
    per_subject = [None if metrics is None else metrics.get(r.subject_id) for r in with_volume]
    weights = weights_from_metrics(per_subject, scheme, cap=cap, floor=floor)

    used = [(r, w) for r, w in zip(with_volume, weights) if w is not None]
    excluded += [r.subject_id for r, w in zip(with_volume, weights) if w is None]
    if excluded:
        log.warning("structure %s, scheme %s: %d subject(s) excluded", structure, scheme.value, len(excluded))
    used_rows = [r for r, _ in used]
    w = np.array([w for _, w in used], dtype=np.float64)
    X = build_design(used_rows)
    y = np.array([r.volumes[structure] for r in used_rows], dtype=np.float64)
    reg = wls_fit(X, y, w, scheme=scheme)
    return GroupResult(
        structure=structure,
        scheme=scheme.value,
        regression=reg,
        subject_ids=tuple(r.subject_id for r in used_rows),
        weights=w,
        excluded=tuple(excluded),
    )
