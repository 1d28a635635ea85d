"""
Named extremal couplings as rearrangement matrices (or normal covariances).
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.engine import (RaOptions, RearrangementMatrix, SigmaCmReport,
                         is_sigma_countermonotonic, ra_minimize, variance_of_sum)
from core.errors import InfeasibleError, InputValidationError
from core.marginals import (DEFAULT_GRID_MODE, Margin, QuantileGrid,
                            discretize_all, support_summary)

logger = logging.getLogger(__name__)

COUPLING_KINDS = ("comonotone", "countermonotone", "pairwise_countermonotone",
                  "joint_mix", "sigma_countermonotone")

PCM_EPS = 1e-12


def _check_same_n(grids: Sequence[QuantileGrid]):
    if not grids:
        raise InputValidationError("at least one grid is required")
    sizes = {g.n for g in grids}
    if len(sizes) != 1:
        raise InputValidationError(f"grids must share n, got sizes {sorted(sizes)}")


def comonotone(grids: Sequence[QuantileGrid]) -> RearrangementMatrix:
    """All columns ascending: every component is an increasing function of one factor."""
    _check_same_n(grids)
    return RearrangementMatrix.from_grids(grids)


def countermonotone(g1: QuantileGrid, g2: QuantileGrid) -> RearrangementMatrix:
    """First column ascending, second descending."""
    _check_same_n([g1, g2])
    return RearrangementMatrix(np.column_stack([g1.values, g2.values[::-1]]), (g1, g2))


# Pairwise countermonotonicity

@dataclass(frozen=True)
class PcmExistence:
    exists: bool
    via: str                 # "none", "da1", "da2", or "pair" (at most two nondegenerate margins)
    slack: float
    da1_sum: float
    da2_sum: float
    notes: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"exists": self.exists, "via": self.via, "slack": self.slack,
                "da1_sum": self.da1_sum, "da2_sum": self.da2_sum, "notes": list(self.notes)}


def pcm_check(margins: Sequence[Margin]) -> PcmExistence:
    """
    Existence of a pairwise countermonotonic vector: either the masses above
    the essential infima sum to at most one (da1), or the masses below the
    essential suprema do (da2).
    """
    if len(margins) < 2:
        raise InputValidationError("pairwise countermonotonicity needs at least two margins")
    summaries = [support_summary(m) for m in margins]
    da1 = float(sum(s.zero_mass for s in summaries))
    da2 = float(sum(s.below_sup for s in summaries))
    nondegenerate = [s for s in summaries if s.a != s.b]

    if len(margins) == 2 or len(nondegenerate) <= 2:
        note = ("d=2: countermonotone pair" if len(margins) == 2 else
                f"only {len(nondegenerate)} nondegenerate margins; degenerate columns are constants")
        logger.info("pairwise countermonotonicity reduces to a pair: %s", note)
        return PcmExistence(True, "pair", max(0.0, 1.0 - min(da1, da2)), da1, da2, (note,))
    if da1 <= 1.0 + PCM_EPS:
        return PcmExistence(True, "da1", max(0.0, 1.0 - da1), da1, da2)
    if da2 <= 1.0 + PCM_EPS:
        return PcmExistence(True, "da2", max(0.0, 1.0 - da2), da1, da2)
    return PcmExistence(False, "none", 1.0 - min(da1, da2), da1, da2)


def _pcm_blocks(columns: List[np.ndarray], masses: List[float]) -> np.ndarray:
    """
    Disjoint row blocks: inside block j column j carries its values above
    the column infimum, every other column sits at its infimum.
    """
    n = len(columns[0])
    counts = [int(np.count_nonzero(col > col[0])) for col in columns]
    for j, (count, mass) in enumerate(zip(counts, masses)):
        if mass > PCM_EPS and count == 0:
            raise InfeasibleError(f"n={n} is too small to resolve the block of margin {j} (mass {mass:g})")
    if sum(counts) > n:
        raise InfeasibleError(f"blocks of sizes {counts} do not fit into n={n} rows")
    out = np.column_stack([np.full(n, col[0]) for col in columns])
    start = 0
    for j, (col, count) in enumerate(zip(columns, counts)):
        out[start:start + count, j] = col[n - count:]
        start += count
    logger.debug("pairwise countermonotone blocks %s, %d all-infimum rows", counts, n - start)
    return out


def pcm_construct(margins: Sequence[Margin], n: int,
                  mode: str = DEFAULT_GRID_MODE) -> RearrangementMatrix:
    """
    Pairwise countermonotone arrangement of the n-point grids of margins.

    Under da1 the rows are split into disjoint blocks, one per margin, sized
    by the grid's count of values above its infimum. da2 is the mirror
    image: negate, build under da1, negate back.
    """
    existence = pcm_check(margins)
    if not existence.exists:
        raise InfeasibleError(
            f"no pairwise countermonotone vector: da1 sum {existence.da1_sum:.6g} > 1 "
            f"and da2 sum {existence.da2_sum:.6g} > 1")
    grids = discretize_all(margins, n, mode)
    columns = [g.values for g in grids]

    if existence.via == "pair":
        active = [j for j, col in enumerate(columns) if col[0] != col[-1]]
        values = np.column_stack(columns).copy()
        if len(active) == 2:
            values[:, active[1]] = columns[active[1]][::-1]
        return RearrangementMatrix(values, grids)

    summaries = [support_summary(m) for m in margins]
    if existence.via == "da1":
        values = _pcm_blocks(columns, [s.zero_mass for s in summaries])
    else:
        flipped = [-col[::-1] for col in columns]
        values = -_pcm_blocks(flipped, [s.below_sup for s in summaries])
    return RearrangementMatrix(values, grids)


# Normal covariances

@dataclass
class CovarianceResult:
    feasible: bool
    covariance: Optional[np.ndarray] = None
    violated: Optional[str] = None
    sum_variance: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "covariance": None if self.covariance is None else self.covariance.tolist(),
            "violated": self.violated,
            "sum_variance": self.sum_variance,
        }


def _check_sigmas(sigmas: Sequence[float]) -> np.ndarray:
    s = np.asarray(sigmas, dtype=float)
    if s.shape != (3,):
        raise InputValidationError(f"exactly three standard deviations are required, got {len(s)}")
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise InputValidationError(f"standard deviations must be positive, got {s.tolist()}")
    return s


def _joint_mix_covariance(s: np.ndarray) -> np.ndarray:
    v = s ** 2
    cov = np.diag(v)
    cov[0, 1] = cov[1, 0] = 0.5 * (v[2] - v[0] - v[1])
    cov[0, 2] = cov[2, 0] = 0.5 * (v[1] - v[0] - v[2])
    cov[1, 2] = cov[2, 1] = 0.5 * (v[0] - v[1] - v[2])
    return cov


def normal_joint_mix_cov(sigmas: Sequence[float]) -> CovarianceResult:
    """
    Covariance of a trivariate normal joint mix with the given standard
    deviations; it exists iff 2 max sigma_i <= sigma_1 + sigma_2 + sigma_3.
    """
    s = _check_sigmas(sigmas)
    total, worst = float(s.sum()), float(2.0 * s.max())
    if worst > total:
        return CovarianceResult(False, violated=f"2*max(sigma) = {worst:g} > sum(sigma) = {total:g}")
    cov = _joint_mix_covariance(s)
    sum_var = float(np.ones(3) @ cov @ np.ones(3))
    if abs(sum_var) > 1e-12 * float(np.sum(s ** 2)):
        logger.warning("joint-mix covariance leaves sum variance %.3g", sum_var)
    return CovarianceResult(True, cov, None, sum_var)


def sigma_cm_normal_solutions(sigmas: Sequence[float]) -> List[np.ndarray]:
    """
    Covariances of trivariate normals with rho(X_i + X_j, X_k) = -1 for every
    split: the rank-one solution always, plus the joint mix when
    sigma_1 <= sigma_2 + sigma_3. Expects sigma_1 >= sigma_2 >= sigma_3.
    """
    s = _check_sigmas(sigmas)
    if not (s[0] >= s[1] >= s[2]):
        raise InputValidationError(f"standard deviations must be sorted descending, got {s.tolist()}")
    direction = np.array([s[0], -s[1], -s[2]])
    solutions = [np.outer(direction, direction)]
    if s[0] <= s[1] + s[2]:
        solutions.append(_joint_mix_covariance(s))
    return solutions


# Numerical constructions

def sigma_countermonotone(grids: Sequence[QuantileGrid],
                          opts: Optional[RaOptions] = None) -> Tuple[RearrangementMatrix, SigmaCmReport]:
    """
    Search for a Sigma-countermonotonic arrangement by minimizing the second
    moment of the sum, then verify it split by split.
    """
    _check_same_n(grids)
    result = ra_minimize(comonotone(grids), variance_of_sum(), opts)
    report = is_sigma_countermonotonic(result.matrix)
    if not report.ok:
        logger.warning("variance minimizer is not Sigma-countermonotonic (fails at %s)", report.failing_subset)
    return result.matrix, report


def joint_mix(grids: Sequence[QuantileGrid], opts: Optional[RaOptions] = None,
              tolerance: float = 1e-9) -> RearrangementMatrix:
    """Constant-row-sum certificate from the detection procedure, or InfeasibleError."""
    from core.mixability import detect_mixability

    report = detect_mixability(grids, opts, tolerance)
    if report.verdict != "mixable":
        raise InfeasibleError(f"no joint mix found: best row-sum range {report.residual:.6g}")
    return report.certificate


@dataclass
class Coupling:
    kind: str
    matrix: RearrangementMatrix
    notes: List[str] = field(default_factory=list)


def build(kind: str, margins: Sequence[Margin], n: int, mode: str = DEFAULT_GRID_MODE,
          opts: Optional[RaOptions] = None, tolerance: float = 1e-9) -> Coupling:
    """Dispatch a coupling kind onto its constructor."""
    if kind not in COUPLING_KINDS:
        raise InputValidationError(f"coupling kind must be one of {COUPLING_KINDS}, got {kind!r}")
    if kind == "pairwise_countermonotone":
        existence = pcm_check(margins)
        return Coupling(kind, pcm_construct(margins, n, mode), list(existence.notes))
    grids = discretize_all(margins, n, mode)
    if kind == "comonotone":
        return Coupling(kind, comonotone(grids))
    if kind == "countermonotone":
        if len(grids) != 2:
            raise InfeasibleError(f"countermonotonicity is defined for d=2, got d={len(grids)}")
        return Coupling(kind, countermonotone(*grids))
    if kind == "joint_mix":
        return Coupling(kind, joint_mix(grids, opts, tolerance))
    matrix, report = sigma_countermonotone(grids, opts)
    notes = [] if report.ok else [f"variance minimizer fails the split at columns {report.failing_subset}"]
    return Coupling(kind, matrix, notes)
