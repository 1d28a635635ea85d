"""
Rearrangement-matrix core.

A RearrangementMatrix is an n x d matrix whose j-th column is a permutation of
a fixed quantile grid; every row carries probability 1/n. Permuting columns
changes the dependence structure and nothing else, so every optimization over
a Frechet class becomes a search over column permutations.
"""
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import FrechetError, InputValidationError
from core.marginals import QuantileGrid, column_grid
from core.utils import seed_streams, sorted_equal, thread_count

logger = logging.getLogger(__name__)

MAX_SIGMA_CM_DIM = 20
CM_RTOL = 1e-12
CX_RTOL = 1e-9


# Matrices

@dataclass(frozen=True, eq=False)
class RearrangementMatrix:
    values: np.ndarray
    provenance: Tuple[QuantileGrid, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise InputValidationError(f"a rearrangement matrix needs shape (n>=1, d>=1), got {values.shape}")
        provenance = tuple(self.provenance)
        if len(provenance) != values.shape[1]:
            raise InputValidationError(
                f"{values.shape[1]} columns but {len(provenance)} provenance grids")
        for j, grid in enumerate(provenance):
            if not sorted_equal(values[:, j], grid.values):
                raise InputValidationError(f"column {j} is not a permutation of its grid")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "provenance", provenance)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def column(self, j: int) -> np.ndarray:
        return self.values[:, j]

    def rearranged(self, values: np.ndarray) -> "RearrangementMatrix":
        """Same grids, new arrangement (validated)."""
        return RearrangementMatrix(values, self.provenance)

    @classmethod
    def from_grids(cls, grids: Sequence[QuantileGrid]) -> "RearrangementMatrix":
        """Columns in grid order (each ascending): the comonotone arrangement."""
        grids = list(grids)
        if not grids:
            raise InputValidationError("at least one grid is required")
        sizes = {g.n for g in grids}
        if len(sizes) != 1:
            raise InputValidationError(f"grids must share n, got sizes {sorted(sizes)}")
        return cls(np.column_stack([g.values for g in grids]), tuple(grids))

    @classmethod
    def from_columns(cls, values: np.ndarray) -> "RearrangementMatrix":
        """Wrap raw columns; each column's own multiset becomes its grid."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        return cls(values, tuple(column_grid(values[:, j]) for j in range(values.shape[1])))


# Costs

COST_KINDS = ("variance", "convex", "product", "tail")
DIRECTIONS = ("minimize", "maximize")


@dataclass(frozen=True)
class CostSpec:
    """
    Declarative objective E[c(row)].

    variance: population variance of the row sum
    convex:   mean of func(row sum), func declared convex by the caller
    product:  mean of the row product
    tail:     fraction of rows with sum >= strike (upper) or <= strike (lower)
    """
    kind: str
    direction: str = "minimize"
    func: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""
    strike: Optional[float] = None
    side: str = "upper"

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise InputValidationError(f"cost kind must be one of {COST_KINDS}, got {self.kind!r}")
        if self.direction not in DIRECTIONS:
            raise InputValidationError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.kind == "convex" and self.func is None:
            raise InputValidationError("convex cost needs a function")
        if self.kind == "tail" and (self.strike is None or self.side not in ("upper", "lower")):
            raise InputValidationError("tail cost needs a strike and side 'upper' or 'lower'")

    @property
    def label(self) -> str:
        if self.kind == "convex":
            return self.name or "convex"
        if self.kind == "tail":
            return f"tail_{self.side}({self.strike:g})"
        return self.kind

    @property
    def supermodular(self) -> bool:
        """Declared supermodular; product additionally needs nonnegative data."""
        return self.kind in ("variance", "convex", "product")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "label": self.label, "direction": self.direction}


def variance_of_sum(direction: str = "minimize") -> CostSpec:
    return CostSpec("variance", direction)


def convex_of_sum(func: Callable[[np.ndarray], np.ndarray], name: str = "convex",
                  direction: str = "minimize") -> CostSpec:
    return CostSpec("convex", direction, func=func, name=name)


def stop_loss(strike: float, direction: str = "maximize") -> CostSpec:
    """E[(S - k)+], a convex function of the sum."""
    k = float(strike)
    return CostSpec("convex", direction, func=lambda s: np.maximum(s - k, 0.0), name=f"stop_loss({k:g})")


def product(direction: str = "minimize") -> CostSpec:
    return CostSpec("product", direction)


def tail_indicator(strike: float, side: str = "upper", direction: str = "maximize") -> CostSpec:
    return CostSpec("tail", direction, strike=float(strike), side=side)


def _as_array(matrix) -> np.ndarray:
    if isinstance(matrix, RearrangementMatrix):
        return matrix.values
    return np.atleast_2d(np.asarray(matrix, dtype=float))


def objective(matrix, cost: CostSpec) -> float:
    """
    Exact evaluation of E[c(row)] over the n equally likely rows. Row
    statistics are sorted before reduction so the value does not depend on
    row order.
    """
    values = _as_array(matrix)
    if cost.kind == "product":
        return float(np.mean(np.sort(np.prod(values, axis=1))))
    sums = np.sort(values.sum(axis=1))
    if cost.kind == "variance":
        return float(np.var(sums))
    if cost.kind == "convex":
        return float(np.mean(cost.func(sums)))
    hits = sums >= cost.strike if cost.side == "upper" else sums <= cost.strike
    return float(np.mean(hits))


def check_convexity(func: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
                    samples: int = 256, seed: int = 0) -> bool:
    """Spot-check midpoint convexity of func on random triples in [lo, hi]."""
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(lo, hi, samples), rng.uniform(lo, hi, samples)
    lhs = np.asarray(func(0.5 * (x + y)), dtype=float)
    rhs = 0.5 * (np.asarray(func(x), dtype=float) + np.asarray(func(y), dtype=float))
    scale = max(1.0, float(np.max(np.abs(rhs))))
    return bool(np.all(lhs <= rhs + 1e-12 * scale))


# Orderings

def oppositely_order(column: Sequence[float], anchor: Sequence[float]) -> np.ndarray:
    """
    Permute column so that it is oppositely ordered to anchor.

    Rows are visited by anchor descending, ties by row index ascending, and
    receive the sorted column ascending. Equal anchors therefore keep the
    sorted column order.
    """
    column = np.asarray(column, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    if column.shape != anchor.shape or column.ndim != 1:
        raise InputValidationError(f"column and anchor lengths differ: {column.shape} vs {anchor.shape}")
    order = np.lexsort((np.arange(len(anchor)), -anchor))
    out = np.empty_like(column)
    out[order] = np.sort(column, kind="stable")
    return out


def is_countermonotonic(x: Sequence[float], y: Sequence[float], rtol: float = CM_RTOL) -> bool:
    """
    True iff (x_i - x_j)(y_i - y_j) <= 0 for every pair of rows. Values
    within rtol * scale of each other count as ties so that sums computed in
    floating point (e.g. u + (1 - u)) still read as constants.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InputValidationError(f"sequences differ in length: {x.shape} vs {y.shape}")
    if len(x) <= 1:
        return True
    tol_x = rtol * max(1.0, float(np.max(np.abs(x))))
    tol_y = rtol * max(1.0, float(np.max(np.abs(y))))
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    starts = np.concatenate(([0], np.flatnonzero(np.diff(xs) > tol_x) + 1))
    if len(starts) == 1:
        return True
    group_min = np.minimum.reduceat(ys, starts)
    group_max = np.maximum.reduceat(ys, starts)
    # largest y in any strictly later x-group
    later_max = np.maximum.accumulate(group_max[::-1])[::-1][1:]
    return bool(np.all(group_min[:-1] >= later_max - tol_y))


@dataclass(frozen=True)
class SigmaCmReport:
    ok: bool
    failing_subset: Optional[Tuple[int, ...]] = None
    splits_checked: int = 0

    def to_dict(self) -> dict:
        return {"ok": self.ok, "failing_subset": self.failing_subset, "splits_checked": self.splits_checked}


def column_splits(d: int):
    """Nonempty proper column subsets up to complement (the complement holds column d-1)."""
    for size in range(1, d):
        for subset in itertools.combinations(range(d - 1), size):
            yield subset


def is_sigma_countermonotonic(matrix) -> SigmaCmReport:
    """
    Check that for every split of the columns into I and its complement the
    two partial row sums are countermonotonic. Column indices are 0-based.
    """
    values = _as_array(matrix)
    d = values.shape[1]
    if d > MAX_SIGMA_CM_DIM:
        raise InputValidationError(f"Sigma-countermonotonicity check supports d <= {MAX_SIGMA_CM_DIM}, got {d}")
    checked = 0
    for subset in column_splits(d):
        part = values[:, list(subset)].sum(axis=1)
        rest = values[:, [j for j in range(d) if j not in subset]].sum(axis=1)
        checked += 1
        if not is_countermonotonic(part, rest):
            logger.debug("Sigma-CM fails at columns %s", subset)
            return SigmaCmReport(False, subset, checked)
    return SigmaCmReport(True, None, checked)


def _others(values: np.ndarray, j: int) -> np.ndarray:
    if values.shape[1] == 1:
        return np.zeros(values.shape[0])
    return np.delete(values, j, axis=1).sum(axis=1)


def local_opt_check(matrix) -> bool:
    """Every column is oppositely ordered to the sum of the others (RA fixed point)."""
    values = _as_array(matrix)
    if values.shape[1] == 1:
        return True
    return all(is_countermonotonic(values[:, j], _others(values, j)) for j in range(values.shape[1]))


def convex_order_leq(sums_a: Sequence[float], sums_b: Sequence[float]) -> bool:
    """
    A <=cx B for two equal-weight samples of the same size: equal means and
    stop-loss dominance E(A - t)+ <= E(B - t)+ at every observed t.
    """
    a = np.sort(np.asarray(sums_a, dtype=float))
    b = np.sort(np.asarray(sums_b, dtype=float))
    if a.shape != b.shape or a.ndim != 1:
        raise InputValidationError(f"samples differ in length: {a.shape} vs {b.shape}")
    n = len(a)
    scale = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    if abs(a.sum() - b.sum()) > CX_RTOL * scale * n:
        return False
    t = np.union1d(a, b)
    return bool(np.all(_stop_loss(a, t) <= _stop_loss(b, t) + CX_RTOL * scale * n))


def _stop_loss(sorted_values: np.ndarray, t: np.ndarray) -> np.ndarray:
    """n * E(X - t)+ for every threshold in t."""
    n = len(sorted_values)
    tail = np.concatenate((np.cumsum(sorted_values[::-1])[::-1], [0.0]))
    idx = np.searchsorted(sorted_values, t, side="right")
    return tail[idx] - t * (n - idx)


def empirical_joint_cdf(matrix, x: Sequence[float]) -> float:
    """P(X_1 <= x_1, ..., X_d <= x_d) under the equal-weight rows."""
    values = _as_array(matrix)
    return float(np.mean(np.all(values <= np.asarray(x, dtype=float), axis=1)))


# Rearrangement Algorithm

@dataclass(frozen=True)
class RaOptions:
    max_sweeps: int = 1000
    restarts: int = 20
    seed: int = 0
    stall_tolerance: float = 0.0
    polish_limit: int = 256       # pairwise-swap polish when n <= polish_limit
    warm_start: bool = False      # restart 0 keeps the input arrangement
    threads: Optional[int] = None

    def __post_init__(self):
        if self.max_sweeps < 1 or self.restarts < 1:
            raise InputValidationError("max_sweeps and restarts must be positive")
        if self.stall_tolerance < 0:
            raise InputValidationError("stall_tolerance must be nonnegative")


@dataclass
class RaResult:
    matrix: RearrangementMatrix
    objective: float
    sweeps_used: int
    restart_index: int
    converged: bool = True
    trace: List[float] = field(default_factory=list)
    surrogate: str = ""

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "sweeps_used": self.sweeps_used,
            "restart_index": self.restart_index,
            "converged": self.converged,
            "surrogate": self.surrogate or None,
        }


@dataclass
class _RestartOutcome:
    index: int
    values: np.ndarray
    objective: float
    sweeps: int
    converged: bool
    trace: List[float]


def _row_function(cost: CostSpec) -> Callable[[np.ndarray], np.ndarray]:
    if cost.kind == "variance":
        return np.square
    return cost.func


def _sweep(values: np.ndarray) -> bool:
    changed = False
    for j in range(values.shape[1]):
        new = oppositely_order(values[:, j], _others(values, j))
        if not np.array_equal(new, values[:, j]):
            values[:, j] = new
            changed = True
    return changed


def swap_polish(values: np.ndarray, func: Callable[[np.ndarray], np.ndarray]) -> bool:
    """
    In-place pairwise row swaps inside each column that lower sum_i func(row sum_i).
    Returns True when at least one swap was made.
    """
    improved = False
    n, d = values.shape
    for j in range(d):
        sums = values.sum(axis=1)
        col = values[:, j]
        tol = 1e-12 * max(1.0, float(np.max(np.abs(func(sums)))))
        for i in range(n):
            delta = col - col[i]
            gain = func(sums[i] + delta) + func(sums - delta) - func(sums[i]) - func(sums)
            k = int(np.argmin(gain))
            if gain[k] < -tol:
                col[i], col[k] = col[k], col[i]
                sums[i] += delta[k]
                sums[k] -= delta[k]
                improved = True
    return improved


def _run_restart(start: np.ndarray, cost: CostSpec, opts: RaOptions,
                 rng: np.random.Generator, index: int) -> _RestartOutcome:
    values = start.copy()
    if not (opts.warm_start and index == 0):
        for j in range(values.shape[1]):
            values[:, j] = rng.permutation(values[:, j])
    polish = values.shape[0] <= opts.polish_limit
    func = _row_function(cost)
    trace = [objective(values, cost)]
    sweeps, converged = 0, False
    while sweeps < opts.max_sweeps:
        changed = _sweep(values)
        sweeps += 1
        if not changed and polish:
            changed = swap_polish(values, func)
        current = objective(values, cost)
        if current > trace[-1] + 1e-9 * max(1.0, abs(trace[-1])):
            raise FrechetError(f"restart {index}: objective rose from {trace[-1]:.12g} to {current:.12g}")
        trace.append(current)
        if not changed:
            converged = True
            break
        if opts.stall_tolerance > 0 and trace[-2] - current <= opts.stall_tolerance:
            break
    if converged and not local_opt_check(values):
        raise FrechetError(f"restart {index}: fixed point is not oppositely ordered")
    logger.debug("restart %d: objective %.12g after %d sweeps", index, trace[-1], sweeps)
    return _RestartOutcome(index, values, trace[-1], sweeps, converged, trace)


def _best_of_restarts(start: np.ndarray, cost: CostSpec, opts: RaOptions) -> _RestartOutcome:
    """Run all restarts; the winner is the lexicographic minimum of (objective, restart index)."""
    streams = seed_streams(opts.seed, opts.restarts)
    workers = min(opts.restarts, opts.threads or thread_count())
    if workers <= 1:
        outcomes = [_run_restart(start, cost, opts, streams[r], r) for r in range(opts.restarts)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_restart, start, cost, opts, streams[r], r) for r in range(opts.restarts)]
            outcomes = [f.result() for f in futures]
    return min(outcomes, key=lambda o: (o.objective, o.index))


def _map_back(arranged: np.ndarray, transformed_sorted: np.ndarray, original_sorted: np.ndarray) -> np.ndarray:
    """Undo a strictly increasing column transform by rank, keeping exact original values."""
    return original_sorted[np.searchsorted(transformed_sorted, arranged, side="left")]


def _minimize_product(matrix: RearrangementMatrix, opts: RaOptions) -> RaResult:
    """
    RA on log-transformed columns under two surrogates (variance of the log
    sum, and E[exp(log sum)] = E[product]); the arrangement with the smaller
    true product expectation wins.
    """
    values = matrix.values
    if np.any(values <= 0):
        raise InputValidationError("product minimization needs strictly positive columns")
    logs = np.log(values)
    logs_sorted = np.sort(logs, axis=0)
    originals_sorted = np.sort(values, axis=0)
    best: Optional[RaResult] = None
    for surrogate in (variance_of_sum(), convex_of_sum(np.exp, "exp")):
        outcome = _best_of_restarts(logs, surrogate, opts)
        arranged = np.column_stack([
            _map_back(outcome.values[:, j], logs_sorted[:, j], originals_sorted[:, j])
            for j in range(values.shape[1])])
        value = objective(arranged, product())
        logger.debug("product via %s surrogate: %.12g", surrogate.label, value)
        if best is None or value < best.objective:
            best = RaResult(matrix.rearranged(arranged), value, outcome.sweeps, outcome.index,
                            outcome.converged, outcome.trace, surrogate.label)
    return best


def ra_minimize(matrix: RearrangementMatrix, cost: CostSpec,
                opts: Optional[RaOptions] = None) -> RaResult:
    """
    Rearrangement Algorithm.

    Every restart shuffles all columns from its own seeded stream, then sweeps
    j = 1..d replacing column j by its opposite ordering against the sum of the
    other columns until a full sweep changes nothing (for small n a pairwise
    swap polish runs at each fixed point before stopping). The best restart by
    (objective, restart index) is returned.

    Args:
        matrix: starting arrangement (its grids fix the column multisets)
        cost: variance, convex or product (minimize)
        opts: RaOptions

    Returns:
        RaResult with the best arrangement and its exact objective
    """
    opts = opts or RaOptions()
    if cost.kind == "tail":
        raise InputValidationError("tail costs are handled by the reduced-domain bound procedures")
    if cost.direction != "minimize":
        raise InputValidationError("ra_minimize needs a cost with direction 'minimize'")
    if matrix.d == 1:
        return RaResult(matrix, objective(matrix, cost), 0, 0, True, [objective(matrix, cost)])
    if cost.kind == "product":
        return _minimize_product(matrix, opts)
    if cost.kind == "convex" and logger.isEnabledFor(logging.DEBUG):
        lo, hi = float(matrix.values.min(axis=0).sum()), float(matrix.values.max(axis=0).sum())
        if lo < hi and not check_convexity(cost.func, lo, hi):
            logger.warning("%s fails a midpoint convexity spot check on [%g, %g]", cost.label, lo, hi)
    outcome = _best_of_restarts(np.array(matrix.values), cost, opts)
    if not outcome.converged:
        logger.warning("RA stopped after %d sweeps without reaching a fixed point", outcome.sweeps)
    return RaResult(matrix.rearranged(outcome.values), outcome.objective, outcome.sweeps,
                    outcome.index, outcome.converged, outcome.trace)


def ra_maximize_supermodular(grids: Sequence[QuantileGrid], cost: CostSpec) -> RaResult:
    """
    Supermodular expectations are maximized by the comonotone arrangement, so
    no search is needed.
    """
    if not cost.supermodular:
        raise InputValidationError(f"{cost.label} is not declared supermodular")
    matrix = RearrangementMatrix.from_grids(grids)
    if cost.kind == "product" and np.any(matrix.values < 0):
        raise InputValidationError("product is supermodular only on nonnegative data")
    value = objective(matrix, cost)
    return RaResult(matrix, value, 0, 0, True, [value])


def grid_scale(values: np.ndarray) -> float:
    """Sum of column ranges (the natural scale of row-sum residuals)."""
    values = _as_array(values)
    spread = float(np.sum(values.max(axis=0) - values.min(axis=0)))
    return spread if math.isfinite(spread) else 1.0
