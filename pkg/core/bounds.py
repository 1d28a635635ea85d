"""
Dependence-uncertainty bounds over a Frechet class.

Supermodular expectations are exact at the comonotone arrangement (maximum)
and, for d=2, at the countermonotone one (minimum). Tail quantiles of the sum
are bounded by running the Rearrangement Algorithm on the conditional tail of
every margin only.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from core.couplings import comonotone, countermonotone
from core.engine import (CostSpec, RaOptions, RearrangementMatrix, objective,
                         product, ra_maximize_supermodular, ra_minimize,
                         variance_of_sum)
from core.errors import InputValidationError
from core.marginals import (DEFAULT_GRID_MODE, Margin, QuantileGrid, cdf,
                            conditional_grid, discretize, quantile, support,
                            support_summary, uniform)

logger = logging.getLogger(__name__)

SIDES = ("upper", "lower")
METHODS = ("analytic_comonotone", "analytic_countermonotone", "ra_reduced_tail", "ra_full")
BISECTION_STEPS = 40

RA_FULL_DISCLAIMER = ("heuristic: Rearrangement Algorithm local optimum; no exact minimizer "
                      "of a supermodular expectation is known for d > 2")


@dataclass
class BoundResult:
    value: float
    side: str
    method: str
    certificate: Optional[RearrangementMatrix] = None
    grid_n: int = 0
    grid_mode: str = DEFAULT_GRID_MODE
    diagnostics: Dict = field(default_factory=dict)
    statistic: str = "objective"          # objective, min_row_sum or max_row_sum
    cost: Optional[CostSpec] = None

    def reevaluate(self) -> Optional[float]:
        """Recompute value from the certificate alone."""
        if self.certificate is None:
            return None
        if self.statistic == "min_row_sum":
            return float(np.min(self.certificate.row_sums()))
        if self.statistic == "max_row_sum":
            return float(np.max(self.certificate.row_sums()))
        return objective(self.certificate, self.cost)

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "side": self.side,
            "method": self.method,
            "statistic": self.statistic if self.cost is None else self.cost.label,
            "cost": None if self.cost is None else self.cost.to_dict(),
            "grid_n": self.grid_n,
            "grid_mode": self.grid_mode,
            "diagnostics": self.diagnostics,
        }


def frechet_envelope(margins: Sequence[Margin], x: Sequence[float]) -> Tuple[float, float]:
    """
    Lower and upper Frechet-Hoeffding bounds max(sum F_j(x_j) - d + 1, 0) and
    min F_j(x_j) for any joint df with these margins at the point x.
    """
    if len(x) != len(margins):
        raise InputValidationError(f"point has {len(x)} coordinates for {len(margins)} margins")
    probs = [float(cdf(m, xj)) for m, xj in zip(margins, x)]
    lower = max(sum(probs) - len(probs) + 1.0, 0.0)
    return lower, min(probs)


def comonotone_var(margins: Sequence[Margin], alpha: float) -> float:
    """alpha-quantile of the sum under comonotonicity: sum_j F_j^{-1}(alpha)."""
    return float(sum(quantile(m, alpha) for m in margins))


# Supermodular expectations

def supermodular_max(grids: Sequence[QuantileGrid], cost: CostSpec) -> BoundResult:
    result = ra_maximize_supermodular(grids, cost)
    return BoundResult(result.objective, "upper", "analytic_comonotone", result.matrix,
                       grids[0].n, grids[0].mode, cost=cost)


def supermodular_min_d2(g1: QuantileGrid, g2: QuantileGrid, cost: CostSpec) -> BoundResult:
    """Exact minimum of a supermodular expectation for two margins: the countermonotone pair."""
    if not cost.supermodular:
        raise InputValidationError(f"{cost.label} is not declared supermodular")
    matrix = countermonotone(g1, g2)
    if cost.kind == "product" and np.any(matrix.values < 0):
        raise InputValidationError("product is supermodular only on nonnegative data")
    return BoundResult(objective(matrix, cost), "lower", "analytic_countermonotone", matrix,
                       g1.n, g1.mode, cost=cost)


def supermodular_min(grids: Sequence[QuantileGrid], cost: CostSpec,
                     opts: Optional[RaOptions] = None) -> BoundResult:
    """
    Minimum of a supermodular expectation: exact for d <= 2, a Rearrangement
    Algorithm local optimum for d > 2 (flagged in diagnostics).
    """
    grids = list(grids)
    if len(grids) == 1:
        result = supermodular_max(grids, cost)
        result.side = "lower"
        return result
    if len(grids) == 2:
        return supermodular_min_d2(grids[0], grids[1], cost)
    if not cost.supermodular:
        raise InputValidationError(f"{cost.label} is not declared supermodular")
    result = ra_minimize(comonotone(grids), replace(cost, direction="minimize"), opts)
    logger.warning("supermodular minimum for d=%d is %s", len(grids), RA_FULL_DISCLAIMER)
    diagnostics = {"disclaimer": RA_FULL_DISCLAIMER, "ra": result.to_dict()}
    return BoundResult(result.objective, "lower", "ra_full", result.matrix,
                       grids[0].n, grids[0].mode, diagnostics, cost=cost)


def min_product_expectation(grids: Sequence[QuantileGrid],
                            opts: Optional[RaOptions] = None) -> BoundResult:
    """Minimal E[X_1 ... X_d] over strictly positive grids (log-space RA)."""
    start = comonotone(grids)
    if np.any(start.values <= 0):
        raise InputValidationError("min_product_expectation needs strictly positive grids")
    result = ra_minimize(start, product(), opts)
    method = "analytic_countermonotone" if start.d == 2 else "ra_full"
    diagnostics = {"ra": result.to_dict()}
    if start.d > 2:
        diagnostics["disclaimer"] = RA_FULL_DISCLAIMER
    return BoundResult(result.objective, "lower", method, result.matrix,
                       start.n, grids[0].mode, diagnostics, cost=product())


# Tail quantiles of the sum

def tail_size(n: int, mass: float) -> int:
    """Grid points for a probability window of the given mass: ceil(mass * n)."""
    # round first so that e.g. 0.01 * 1e5 counts as exactly 1000
    return int(math.ceil(round(mass * n, 9)))


def _tail_grids(margins: Sequence[Margin], alpha: float, n: int, side: str, mode: str):
    if side == "upper":
        m = tail_size(n, 1.0 - alpha)
        lo, hi = alpha, 1.0
    else:
        m = tail_size(n, alpha)
        lo, hi = 0.0, alpha
    if m < 2:
        raise InputValidationError(
            f"alpha={alpha} leaves {m} tail point(s) at n={n}; at least 2 are needed")
    return [conditional_grid(mg, lo, hi, m, mode) for mg in margins]


def _check_alpha(alpha: float):
    if not 0.0 < alpha < 1.0:
        raise InputValidationError(f"alpha must lie in (0, 1), got {alpha}")


def _transfer(previous: RearrangementMatrix, grids: Sequence[QuantileGrid]) -> RearrangementMatrix:
    """Carry the rank pattern of a previous arrangement onto new grids of any size."""
    m_old, m_new = previous.n, grids[0].n
    source_rows = (np.arange(m_new) * m_old) // m_new
    columns = []
    for j, grid in enumerate(grids):
        old_ranks = np.argsort(np.argsort(previous.values[:, j], kind="stable"), kind="stable")
        keys = old_ranks[source_rows]
        new_ranks = np.empty(m_new, dtype=int)
        new_ranks[np.lexsort((np.arange(m_new), keys))] = np.arange(m_new)
        columns.append(grid.values[new_ranks])
    return RearrangementMatrix(np.column_stack(columns), tuple(grids))


def _reduced_tail(margins: Sequence[Margin], alpha: float, n: int, opts: Optional[RaOptions],
                  side: str, mode: str, start: Optional[RearrangementMatrix] = None) -> BoundResult:
    grids = _tail_grids(margins, alpha, n, side, mode)
    if start is None:
        matrix = comonotone(grids)
    else:
        matrix = _transfer(start, grids)
    result = ra_minimize(matrix, variance_of_sum(), opts)
    sums = result.matrix.row_sums()
    if side == "upper":
        value, statistic = float(np.min(sums)), "min_row_sum"
    else:
        value, statistic = float(np.max(sums)), "max_row_sum"
    diagnostics = {
        "alpha": alpha,
        "tail_points": grids[0].n,
        "tail_window": list(grids[0].window),
        "row_sum_range": float(np.max(sums) - np.min(sums)),
        "ra": result.to_dict(),
    }
    return BoundResult(value, side, "ra_reduced_tail", result.matrix, grids[0].n, mode,
                       diagnostics, statistic)


def worst_var(margins: Sequence[Margin], alpha: float, n: int,
              opts: Optional[RaOptions] = None, bracket: bool = True,
              start: Optional[RearrangementMatrix] = None) -> BoundResult:
    """
    Worst-case (largest) alpha-quantile of the sum.

    Each margin's upper tail beyond alpha is discretized into ceil((1-alpha) n)
    lower-mode points; the tail block is flattened by variance-minimizing RA
    and its minimum row sum is the bound. With bracket=True the midpoint-mode
    tail is solved too and reported in diagnostics.

    Args:
        margins: the d margins
        alpha: level in (0, 1)
        n: grid size of the full [0, 1] range
        opts: RaOptions
        bracket: also solve the midpoint tail grid
        start: previous arrangement to warm-start from

    Returns:
        BoundResult, side upper, certificate = the tail block
    """
    _check_alpha(alpha)
    result = _reduced_tail(margins, alpha, n, opts, "upper", "lower", start)
    if bracket:
        other = _reduced_tail(margins, alpha, n, opts, "upper", "midpoint")
        result.diagnostics["bracket"] = {"lower": result.value, "midpoint": other.value}
    logger.info("worst VaR at alpha=%g: %.10g (%d tail points)", alpha, result.value, result.grid_n)
    return result


def best_var(margins: Sequence[Margin], alpha: float, n: int,
             opts: Optional[RaOptions] = None, bracket: bool = True) -> BoundResult:
    """
    Best-case (smallest) alpha-quantile of the sum: the mirror procedure on the
    [0, alpha] part of every margin, upper-mode grids, maximum row sum.
    """
    _check_alpha(alpha)
    result = _reduced_tail(margins, alpha, n, opts, "lower", "upper")
    if bracket:
        other = _reduced_tail(margins, alpha, n, opts, "lower", "midpoint")
        result.diagnostics["bracket"] = {"upper": result.value, "midpoint": other.value}
    logger.info("best VaR at alpha=%g: %.10g (%d points)", alpha, result.value, result.grid_n)
    return result


def tail_prob_max(margins: Sequence[Margin], k: float, n: int,
                  opts: Optional[RaOptions] = None) -> BoundResult:
    """
    Largest P(S >= k) over the Frechet class, as 1 - alpha* for the smallest
    alpha* with worst_var(alpha*) >= k, found by bisection. Every step after the
    first warm-starts from the nearest cached arrangement with one restart.
    """
    opts = opts or RaOptions()
    low_sum = sum(support(m)[0] for m in margins)
    high_sum = sum(support(m)[1] for m in margins)
    if k <= low_sum:
        return BoundResult(1.0, "upper", "analytic_comonotone", None, n, "lower",
                           {"reason": "k at or below the smallest possible sum"})
    # continuous margins put no mass on the top of the support
    all_continuous = not any(m.is_discrete for m in margins)
    if k > high_sum or (all_continuous and k >= high_sum):
        return BoundResult(0.0, "upper", "analytic_comonotone", None, n, "lower",
                           {"reason": "k at or above the largest possible sum"})

    warm = replace(opts, warm_start=True, restarts=1)
    cache: Dict[float, BoundResult] = {}

    def evaluate(alpha: float) -> BoundResult:
        if alpha not in cache:
            if cache:
                nearest = min(cache, key=lambda a: (abs(a - alpha), a))
                cache[alpha] = worst_var(margins, alpha, n, warm, False, cache[nearest].certificate)
            else:
                cache[alpha] = worst_var(margins, alpha, n, opts, False)
            logger.debug("bisection: alpha=%.12g worst VaR %.10g", alpha, cache[alpha].value)
        return cache[alpha]

    lo, hi = 0.0, 1.0 - 2.0 / n
    if hi <= lo:
        raise InputValidationError(f"n={n} is too small for the tail bisection")
    top = evaluate(hi)
    if top.value < k:
        logger.warning("k=%g exceeds the worst VaR at the finest resolvable level; "
                       "reporting the resolution limit %g", k, 1.0 - hi)
        top_diag = dict(top.diagnostics, resolution_limited=True)
        return BoundResult(1.0 - hi, "upper", "ra_reduced_tail", top.certificate, top.grid_n,
                           "lower", top_diag, "min_row_sum")
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if evaluate(mid).value >= k:
            hi = mid
        else:
            lo = mid
    found = cache[hi]
    diagnostics = {"k": k, "alpha": hi, "worst_var_at_alpha": found.value,
                   "evaluations": len(cache), "tail_points": found.grid_n}
    return BoundResult(1.0 - hi, "upper", "ra_reduced_tail", found.certificate, found.grid_n,
                       "lower", diagnostics, "min_row_sum")


# Dependence measures

def spearman_extremes(d: int, min_product_value: float) -> Tuple[float, float]:
    """
    Range of the multivariate Spearman rho
        (d + 1) / (1 - (d + 1) 2^-d) * (E[U_1 ... U_d] - 2^-d)
    given the minimal product expectation of d uniforms. The maximum 1 is
    attained by comonotonicity.
    """
    if d < 2:
        raise InputValidationError(f"Spearman's rho needs d >= 2, got {d}")
    base = 2.0 ** -d
    scale = (d + 1.0) / (1.0 - (d + 1.0) * base)
    return scale * (min_product_value - base), 1.0


def spearman_min_product(d: int, n: int, opts: Optional[RaOptions] = None,
                         mode: str = DEFAULT_GRID_MODE) -> BoundResult:
    """min_product_expectation on d Uniform(0,1) grids."""
    grids = [discretize(uniform(), n, mode) for _ in range(d)]
    return min_product_expectation(grids, opts)


def _grid_correlation(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.corrcoef(x, y)[0, 1])


def pearson_extremes(m1: Margin, m2: Margin, n: int,
                     mode: str = DEFAULT_GRID_MODE) -> Tuple[float, float]:
    """Pearson correlation at the countermonotone and comonotone pairings of the grids."""
    for m in (m1, m2):
        sd = support_summary(m).sd
        if sd is None or not math.isfinite(sd) or sd == 0.0:
            raise InputValidationError(f"{m} needs a finite nonzero variance")
    g1, g2 = discretize(m1, n, mode), discretize(m2, n, mode)
    if g1.spread == 0.0 or g2.spread == 0.0:
        raise InputValidationError("grid has zero variance; increase n")
    low = _grid_correlation(g1.values, g2.values[::-1])
    high = _grid_correlation(g1.values, g2.values)
    return low, high
