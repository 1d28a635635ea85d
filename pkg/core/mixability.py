"""
Joint mixability: analytic necessary and sufficient tests, and the numerical
detection procedure (variance-minimizing rearrangement of the grids).

Test order is cheap to expensive: the one-sided rule and the necessary
inequalities, then analytic sufficient conditions, then the detection
procedure. Numerics alone never conclude not_mixable.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from core.engine import (RaOptions, RearrangementMatrix, grid_scale,
                         ra_minimize, variance_of_sum)
from core.errors import InputValidationError
from core.marginals import (DECREASING_DENSITY, SYMMETRIC_UNIMODAL, Margin,
                            QuantileGrid, cdf, center, density, support,
                            support_summary)

logger = logging.getLogger(__name__)

NORMS = ("L1", "L2", "range")
DEFAULT_TOLERANCE = 1e-9

G_INVERSE_ATOL = 1e-10
G_GRID_POINTS = 512
G_GRID = np.geomspace(1e-6, 0.5 - 1e-6, G_GRID_POINTS)


@dataclass(frozen=True)
class TestOutcome:
    """
    One test result. Necessary tests report pass/fail/na; sufficient tests
    report mixable/not_mixable/na.
    """
    __test__ = False

    name: str
    status: str
    slack: Optional[float] = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "status": self.status, "slack": self.slack, "detail": self.detail}


@dataclass
class MixReport:
    verdict: str
    evidence: List[TestOutcome] = field(default_factory=list)
    center: Optional[float] = None
    certificate: Optional[RearrangementMatrix] = None
    residual: Optional[float] = None
    threshold: Optional[float] = None

    def to_dict(self) -> dict:
        cert = None
        if self.certificate is not None:
            cert = {"n": self.certificate.n, "d": self.certificate.d}
        return {
            "verdict": self.verdict,
            "evidence": [e.to_dict() for e in self.evidence],
            "center": self.center,
            "residual": self.residual,
            "threshold": self.threshold,
            "certificate": cert,
        }


def _rel_tol(*values: float) -> float:
    finite = [abs(v) for v in values if math.isfinite(v)]
    return 1e-12 * max([1.0] + finite)


# Necessary conditions

def one_sided_rule(margins: Sequence[Margin]) -> TestOutcome:
    """
    The margins of a joint mix cannot be one sided: all supports bounded
    below with one unbounded above (or the mirror image) rules mixability out.
    """
    ends = [support(m) for m in margins]
    below = all(math.isfinite(a) for a, _ in ends) and any(math.isinf(b) for _, b in ends)
    above = all(math.isfinite(b) for _, b in ends) and any(math.isinf(a) for a, _ in ends)
    if below or above:
        side = "bounded below, unbounded above" if below else "bounded above, unbounded below"
        return TestOutcome("one_sided", "fail", detail=side)
    return TestOutcome("one_sided", "pass")


def mean_inequality(margins: Sequence[Margin]) -> TestOutcome:
    """sum a_j + max l_j <= sum mu_j <= sum b_j - max l_j."""
    summaries = [support_summary(m) for m in margins]
    if any(s.mean is None or not math.isfinite(s.mean) for s in summaries):
        return TestOutcome("mean_inequality", "na", detail="some mean is not finite")
    if any(math.isinf(s.a) for s in summaries):
        return TestOutcome("mean_inequality", "na", detail="some support is unbounded below")
    total = sum(s.mean for s in summaries)
    widest = max(s.length for s in summaries)
    if math.isinf(widest):
        return TestOutcome("mean_inequality", "fail", -math.inf, "unbounded support length")
    left = sum(s.a for s in summaries) + widest
    right = sum(s.b for s in summaries) - widest
    slack = min(total - left, right - total)
    status = "pass" if slack >= -_rel_tol(left, right, total) else "fail"
    return TestOutcome("mean_inequality", status, slack, f"{left:.6g} <= {total:.6g} <= {right:.6g}")


def _norm_value(m: Margin, norm: str) -> Optional[float]:
    s = support_summary(m)
    if norm == "L1":
        return s.abs_dev
    if norm == "L2":
        return s.sd
    return s.length


def norm_inequality(margins: Sequence[Margin], norm: str = "L2") -> TestOutcome:
    """
    sum_j ||X_j - mu_j|| >= 2 max_j ||X_j - mu_j|| for the mean absolute
    deviation (L1), standard deviation (L2) or support length (range).
    """
    if norm not in NORMS:
        raise InputValidationError(f"norm must be one of {NORMS}, got {norm!r}")
    name = f"norm_inequality_{norm}"
    values = [_norm_value(m, norm) for m in margins]
    if any(v is None or not math.isfinite(v) for v in values):
        return TestOutcome(name, "na", detail=f"{norm} norm undefined or infinite for some margin")
    total, worst = float(sum(values)), float(2.0 * max(values))
    slack = total - worst
    status = "pass" if slack >= -_rel_tol(total) else "fail"
    return TestOutcome(name, status, slack, f"{total:.6g} >= {worst:.6g}")


# Sufficient conditions

def sufficient_decreasing_density(margins: Sequence[Margin]) -> TestOutcome:
    """Decreasing densities: jointly mixable iff the mean inequality holds."""
    name = "decreasing_density"
    if any(m.family not in DECREASING_DENSITY for m in margins):
        return TestOutcome(name, "na", detail="some margin lacks a decreasing density")
    sided = one_sided_rule(margins)
    if sided.status == "fail":
        return TestOutcome(name, "not_mixable", detail=f"one-sided margins ({sided.detail})")
    means = mean_inequality(margins)
    if means.status == "na":
        return TestOutcome(name, "na", detail=means.detail)
    verdict = "mixable" if means.status == "pass" else "not_mixable"
    return TestOutcome(name, verdict, means.slack, means.detail)


def _symmetric_scale(m: Margin) -> float:
    if m.family == "uniform":
        return 0.5 * (m.params[1] - m.params[0])
    return m.params[1]


def sufficient_location_scale(margins: Sequence[Margin]) -> TestOutcome:
    """
    Unimodal-symmetric margins from one location-scale family (this covers
    normal tuples, the elliptical case): mixable iff sum s_j >= 2 max s_j.
    """
    families = {m.family for m in margins}
    if len(families) != 1 or next(iter(families)) not in SYMMETRIC_UNIMODAL:
        return TestOutcome("location_scale", "na", detail="not one unimodal-symmetric family")
    family = next(iter(families))
    scales = [_symmetric_scale(m) for m in margins]
    total, worst = float(sum(scales)), float(2.0 * max(scales))
    slack = total - worst
    verdict = "mixable" if slack >= -_rel_tol(total) else "not_mixable"
    return TestOutcome(f"location_scale_{family}", verdict, slack, f"{total:.6g} >= {worst:.6g}")


def g_inverse(m: Margin, levels: np.ndarray) -> np.ndarray:
    """
    Generalized inverse of G(x) = F(c + x) - x f(c + x) - 1/2 on x >= 0, c the
    symmetry center, by vectorized bisection to absolute tolerance 1e-10.
    Levels G never reaches map to inf.
    """
    c = center(m)
    lo_end, hi_end = support(m)
    levels = np.asarray(levels, dtype=float)

    def g(x):
        return np.asarray(cdf(m, c + x), dtype=float) - x * np.asarray(density(m, c + x), dtype=float) - 0.5

    lo = np.zeros_like(levels)
    if math.isfinite(hi_end):
        hi = np.full_like(levels, hi_end - c)
        # G jumps to 1/2 at the top of a bounded support
        unreachable = levels > 0.5
    else:
        hi = np.full_like(levels, _symmetric_scale(m))
        for _ in range(200):
            short = g(hi) < levels
            if not np.any(short):
                break
            hi[short] *= 2.0
        unreachable = g(hi) < levels
    hi[unreachable] = lo[unreachable]
    for _ in range(200):
        if np.max(hi - lo) <= G_INVERSE_ATOL:
            break
        mid = 0.5 * (lo + hi)
        above = g(mid) >= levels
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    if np.any(unreachable):
        logger.debug("G of %s stays below %d of %d levels", m, int(np.sum(unreachable)), levels.size)
    return np.where(unreachable, np.inf, hi)


def sufficient_unimodal_symmetric(margins: Sequence[Margin]) -> TestOutcome:
    """
    Sufficient condition for unimodal-symmetric margins: for every a in
    (0, 1/2), sum_j G_j^{-1}(a) >= 2 max_j G_j^{-1}(a), checked on 512
    log-spaced levels. Failure is inconclusive (na).
    """
    name = "unimodal_symmetric"
    odd = [str(m) for m in margins if m.family not in SYMMETRIC_UNIMODAL]
    if odd:
        raise InputValidationError(f"not unimodal-symmetric: {', '.join(odd)}")
    inverses = np.vstack([g_inverse(m, G_GRID) for m in margins])
    infinite = np.isinf(inverses).sum(axis=0)
    finite = infinite == 0
    # an infinite inverse is balanced only by a second one
    if np.any(infinite == 1):
        return TestOutcome(name, "na", -math.inf, "one margin alone is unbounded at some level")
    if not np.any(finite):
        return TestOutcome(name, "na", detail="no level with finite inverses")
    totals = inverses[:, finite].sum(axis=0)
    worst = 2.0 * inverses[:, finite].max(axis=0)
    gaps = totals - worst
    tol = 1e-8 * max(1.0, float(np.max(worst)))
    slack = float(np.min(gaps))
    if np.all(gaps >= -tol):
        return TestOutcome(name, "mixable", slack)
    return TestOutcome(name, "na", slack, "condition fails on part of the level grid")


def _concave_nonconstant(m: Margin) -> bool:
    a, b = support(m)
    x = np.linspace(a, b, 259)[1:-1]
    f = np.asarray(density(m, x), dtype=float)
    tol = 1e-9 * max(1.0, float(np.max(f)))
    second = f[:-2] - 2.0 * f[1:-1] + f[2:]
    return bool(np.all(second <= tol) and np.ptp(f) > tol)


def complete_mixability_rules(margin: Margin, d: int) -> TestOutcome:
    """
    Known d-complete-mixability results for a single margin, tried in order:
    discrete uniform on d points, binomial with d*p integral, Cauchy,
    concave density on a bounded interval (d >= 3), density bounded below
    by 3/(d(b-a)).
    """
    if d < 1:
        raise InputValidationError(f"d must be positive, got {d}")
    if margin.is_degenerate:
        return TestOutcome("complete_mixability", "mixable", detail="degenerate")
    if margin.family in ("discrete_uniform", "empirical") and len(margin.points) == d:
        return TestOutcome("complete_mixability", "mixable", detail="discrete_uniform")
    if margin.family == "binomial":
        dp = d * margin.params[1]
        if abs(dp - round(dp)) <= 1e-12 * max(1.0, dp):
            return TestOutcome("complete_mixability", "mixable", detail="binomial")
    if margin.family == "cauchy" and d >= 2:
        return TestOutcome("complete_mixability", "mixable", detail="cauchy")
    if not margin.is_discrete:
        a, b = support(margin)
        if math.isfinite(a) and math.isfinite(b):
            if d >= 3 and _concave_nonconstant(margin):
                return TestOutcome("complete_mixability", "mixable", detail="concave_density")
            x = np.linspace(a, b, 257)[1:-1]
            floor = float(np.min(density(margin, x)))
            need = 3.0 / (d * (b - a))
            if floor >= need * (1.0 - 1e-12):
                return TestOutcome("complete_mixability", "mixable", floor - need, "density_lower_bound")
    return TestOutcome("complete_mixability", "na")


# Numerical detection

def _widest_reversed(start: RearrangementMatrix) -> RearrangementMatrix:
    """Comonotone columns with the widest one flipped; a joint mix when it balances the rest."""
    values = start.values.copy()
    widest = int(np.argmax(np.ptp(values, axis=0)))
    values[:, widest] = values[::-1, widest]
    return start.rearranged(values)


def detect_mixability(grids: Sequence[QuantileGrid], opts: Optional[RaOptions] = None,
                      tolerance: float = DEFAULT_TOLERANCE) -> MixReport:
    """
    Mixability Detection Procedure.

    Minimizes the variance of the row sum from several random starts and
    one structured start (the widest column reversed against the comonotone
    rest), and reports the best max-min row-sum range. The verdict is mixable when that
    range is within tolerance * (sum of grid ranges), undecided otherwise.

    Args:
        grids: one grid per margin, all with the same n
        opts: RaOptions (restarts, seed, sweeps)
        tolerance: relative tolerance on the residual

    Returns:
        MixReport with certificate, residual and center (mean row sum)
    """
    if not grids:
        raise InputValidationError("at least one grid is required")
    if len({g.n for g in grids}) != 1:
        raise InputValidationError("grids must share n")
    start = RearrangementMatrix.from_grids(grids)
    result = ra_minimize(start, variance_of_sum(), opts)
    seeded = ra_minimize(_widest_reversed(start), variance_of_sum(),
                         replace(opts or RaOptions(), restarts=1, warm_start=True))
    if seeded.objective < result.objective:
        logger.debug("detection: widest-reversed start wins (%.6g < %.6g)", seeded.objective, result.objective)
        result = seeded
    sums = result.matrix.row_sums()
    residual = float(sums.max() - sums.min())
    threshold = tolerance * grid_scale(start.values)
    verdict = "mixable" if residual <= threshold else "undecided"
    logger.info("detection: residual %.6g (threshold %.3g) after %d sweeps -> %s",
                residual, threshold, result.sweeps_used, verdict)
    evidence = [TestOutcome("detection", verdict if verdict == "mixable" else "na",
                            threshold - residual, f"restart {result.restart_index}")]
    return MixReport(verdict, evidence, float(np.mean(sums)), result.matrix, residual, threshold)


def analyze(margins: Sequence[Margin], grids: Optional[Sequence[QuantileGrid]] = None,
            opts: Optional[RaOptions] = None, tolerance: float = DEFAULT_TOLERANCE) -> MixReport:
    """
    Full mixability analysis: necessary tests, analytic sufficient tests, then
    (if grids are given) the detection procedure for a certificate.
    """
    if not margins:
        raise InputValidationError("at least one margin is required")
    evidence: List[TestOutcome] = []

    sided = one_sided_rule(margins)
    necessary = [sided, mean_inequality(margins)] + [norm_inequality(margins, norm) for norm in NORMS]
    evidence.extend(necessary)
    if any(t.status == "fail" for t in necessary):
        failed = [t.name for t in necessary if t.status == "fail"]
        logger.info("necessary condition(s) fail: %s", ", ".join(failed))
        return MixReport("not_mixable", evidence)

    sufficient = [sufficient_decreasing_density(margins), sufficient_location_scale(margins)]
    if all(m.family in SYMMETRIC_UNIMODAL for m in margins):
        sufficient.append(sufficient_unimodal_symmetric(margins))
    if all(m == margins[0] for m in margins):
        sufficient.append(complete_mixability_rules(margins[0], len(margins)))
    evidence.extend(sufficient)
    if any(t.status == "not_mixable" for t in sufficient):
        return MixReport("not_mixable", evidence)
    verdict = "mixable" if any(t.status == "mixable" for t in sufficient) else "undecided"

    summaries = [support_summary(m) for m in margins]
    means = [s.mean for s in summaries]
    center_value = float(sum(means)) if all(v is not None and math.isfinite(v) for v in means) else None
    report = MixReport(verdict, evidence, center_value if verdict == "mixable" else None)

    if grids is not None:
        detected = detect_mixability(grids, opts, tolerance)
        report.evidence.extend(detected.evidence)
        report.certificate = detected.certificate
        report.residual = detected.residual
        report.threshold = detected.threshold
        if verdict == "undecided":
            report.verdict = detected.verdict
        if report.verdict == "mixable" and (report.center is None or detected.verdict == "mixable"):
            report.center = detected.center
    return report
