"""
Univariate margins and their equal-weight quantile discretizations.

A Margin is an immutable description of a distribution function F. Every
operation goes through the left-continuous quasi-inverse
    quantile(u) = inf{x : F(x) >= u},   quantile(0) = inf{x : F(x) > 0}
so discrete and continuous families share one code path for grids.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, stats

from core.errors import InfeasibleError, InputValidationError
from core.utils import read_values_file

logger = logging.getLogger(__name__)

GRID_MODES = ("lower", "upper", "midpoint", "shifted")
DEFAULT_GRID_MODE = "midpoint"

CONTINUOUS_FAMILIES = ("uniform", "normal", "pareto", "exponential", "lognormal", "cauchy")
DISCRETE_FAMILIES = ("binomial", "discrete_uniform", "empirical")

# Parameter names, in storage order
FAMILY_PARAMS: Dict[str, Tuple[str, ...]] = {
    "uniform": ("a", "b"),
    "normal": ("mu", "sigma"),
    "pareto": ("theta",),
    "exponential": ("rate",),
    "lognormal": ("mu", "sigma"),
    "cauchy": ("loc", "scale"),
    "binomial": ("trials", "p"),
    "discrete_uniform": (),
    "empirical": (),
}

# Shape traits consulted by the mixability tests
DECREASING_DENSITY = ("uniform", "exponential", "pareto")
SYMMETRIC_UNIMODAL = ("uniform", "normal", "cauchy")

QUAD_EPSREL = 1e-9

ArrayLike = Union[float, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class Margin:
    """A univariate distribution; build it with the family helpers below."""
    family: str
    params: Tuple[float, ...] = ()
    points: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.family not in FAMILY_PARAMS:
            raise InputValidationError(f"unknown margin family {self.family!r}")
        expected = FAMILY_PARAMS[self.family]
        if len(self.params) != len(expected):
            raise InputValidationError(
                f"{self.family} expects parameters {expected}, got {self.params}")
        if any(not math.isfinite(p) for p in self.params):
            raise InputValidationError(f"{self.family} parameters must be finite: {self.params}")
        _validate_params(self.family, self.params, self.points)

    def __str__(self):
        if self.points:
            return f"{self.family}({len(self.points)} points)"
        args = ", ".join(f"{k}={v:g}" for k, v in zip(FAMILY_PARAMS[self.family], self.params))
        return f"{self.family}({args})"

    @property
    def is_discrete(self) -> bool:
        return self.family in DISCRETE_FAMILIES

    @property
    def is_degenerate(self) -> bool:
        lo, hi = support(self)
        return lo == hi

    def param(self, name: str) -> float:
        return self.params[FAMILY_PARAMS[self.family].index(name)]

    @cached_property
    def _frozen(self):
        p = self.params
        if self.family == "uniform":
            return stats.uniform(loc=p[0], scale=p[1] - p[0])
        if self.family == "normal":
            return stats.norm(loc=p[0], scale=p[1])
        if self.family == "pareto":
            # Lomax(c) has cdf 1 - (1 + x)^(-c) on x >= 0
            return stats.lomax(p[0])
        if self.family == "exponential":
            return stats.expon(scale=1.0 / p[0])
        if self.family == "lognormal":
            return stats.lognorm(s=p[1], scale=math.exp(p[0]))
        if self.family == "cauchy":
            return stats.cauchy(loc=p[0], scale=p[1])
        raise InputValidationError(f"{self.family} is not a continuous family")

    @cached_property
    def _atoms(self) -> Tuple[np.ndarray, np.ndarray]:
        """Support points with positive mass and their cumulative probabilities."""
        if self.family == "binomial":
            trials, p = int(self.params[0]), self.params[1]
            ks = np.arange(trials + 1, dtype=float)
            pmf = stats.binom.pmf(ks, trials, p)
            keep = pmf > 0
            values, cum = ks[keep], np.cumsum(pmf[keep])
        else:
            values = np.asarray(self.points, dtype=float)
            cum = np.arange(1, len(values) + 1, dtype=float) / len(values)
        cum[-1] = 1.0
        return values, cum


def _validate_params(family: str, params: Tuple[float, ...], points: Tuple[float, ...]):
    if family == "uniform" and not params[0] < params[1]:
        raise InputValidationError(f"uniform needs a < b, got a={params[0]}, b={params[1]}")
    if family in ("normal", "lognormal") and params[1] <= 0:
        raise InputValidationError(f"{family} needs sigma > 0, got {params[1]}")
    if family == "pareto" and params[0] <= 0:
        raise InputValidationError(f"pareto needs theta > 0, got {params[0]}")
    if family == "exponential" and params[0] <= 0:
        raise InputValidationError(f"exponential needs rate > 0, got {params[0]}")
    if family == "cauchy" and params[1] <= 0:
        raise InputValidationError(f"cauchy needs scale > 0, got {params[1]}")
    if family == "binomial":
        trials, p = params
        if trials < 0 or trials != int(trials):
            raise InputValidationError(f"binomial needs a nonnegative integer trial count, got {trials}")
        if not 0.0 <= p <= 1.0:
            raise InputValidationError(f"binomial needs 0 <= p <= 1, got {p}")
    if family in ("discrete_uniform", "empirical"):
        if not points:
            raise InputValidationError(f"{family} needs a nonempty value list")
        if any(not math.isfinite(v) for v in points):
            raise InputValidationError(f"{family} values must be finite")
        if list(points) != sorted(points):
            raise InputValidationError(f"{family} values must be sorted")
    elif points:
        raise InputValidationError(f"{family} does not take a value list")


# Family helpers

def uniform(a: float = 0.0, b: float = 1.0) -> Margin:
    return Margin("uniform", (float(a), float(b)))


def normal(mu: float = 0.0, sigma: float = 1.0) -> Margin:
    return Margin("normal", (float(mu), float(sigma)))


def pareto(theta: float) -> Margin:
    """Pareto(theta) with cdf 1 - (1 + x)^(-theta) on x >= 0."""
    return Margin("pareto", (float(theta),))


def exponential(rate: float = 1.0) -> Margin:
    return Margin("exponential", (float(rate),))


def lognormal(mu: float = 0.0, sigma: float = 1.0) -> Margin:
    return Margin("lognormal", (float(mu), float(sigma)))


def cauchy(loc: float = 0.0, scale: float = 1.0) -> Margin:
    return Margin("cauchy", (float(loc), float(scale)))


def binomial(trials: int, p: float) -> Margin:
    return Margin("binomial", (float(trials), float(p)))


def bernoulli(p: float) -> Margin:
    return binomial(1, p)


def discrete_uniform(points: Sequence[float]) -> Margin:
    """Equal mass on each listed point (repeated points carry repeated mass)."""
    return Margin("discrete_uniform", points=tuple(sorted(float(v) for v in points)))


def empirical(sample: Sequence[float]) -> Margin:
    return Margin("empirical", points=tuple(sorted(float(v) for v in sample)))


def make_margin(family: str, params: Optional[Dict[str, float]] = None,
                points: Optional[Sequence[float]] = None) -> Margin:
    """
    Build a Margin from a family name and keyword parameters.

    Args:
        family: one of FAMILY_PARAMS
        params: mapping from parameter name to value
        points: value list for discrete_uniform / empirical

    Returns:
        The validated Margin
    """
    params = dict(params or {})
    if family == "bernoulli":
        family, params = "binomial", {"trials": 1, "p": params.pop("p", None), **params}
    if family not in FAMILY_PARAMS:
        raise InputValidationError(f"unknown margin family {family!r}")
    names = FAMILY_PARAMS[family]
    missing = [k for k in names if params.get(k) is None]
    extra = [k for k in params if k not in names]
    if missing or extra:
        raise InputValidationError(
            f"{family} parameters must be exactly {names}; missing {missing}, unexpected {extra}")
    if family in ("discrete_uniform", "empirical"):
        return discrete_uniform(points or ()) if family == "discrete_uniform" else empirical(points or ())
    return Margin(family, tuple(float(params[k]) for k in names))


def margin_from_config(entry: Dict) -> List[Margin]:
    """
    One config entry {"family", "params", "repeat"} -> list of Margins.
    discrete_uniform takes params {"points": [...]}, empirical takes
    {"sample": [...]} or {"sample_file": path}.
    """
    if not isinstance(entry, dict):
        raise InputValidationError(f"margin entry must be an object, got {type(entry).__name__}")
    extra = sorted(set(entry) - {"family", "params", "repeat"})
    if extra:
        raise InputValidationError(f"unknown margin keys {extra}")
    family = entry.get("family")
    params = dict(entry.get("params") or {})
    repeat = entry.get("repeat", 1)
    if isinstance(repeat, bool) or not isinstance(repeat, int) or repeat < 1:
        raise InputValidationError(f"repeat must be a positive integer, got {repeat!r}")

    points = None
    if family == "discrete_uniform":
        points = params.pop("points", None)
    elif family == "empirical":
        points = params.pop("sample", None)
        sample_file = params.pop("sample_file", None)
        if sample_file is not None:
            points = read_values_file(sample_file)
            if points is None:
                raise InputValidationError(f"could not read sample file {sample_file!r}")
    if points is not None and not isinstance(points, (list, tuple)):
        raise InputValidationError(f"{family} values must be a list")
    try:
        margin = make_margin(family, params, points)
    except TypeError as e:
        raise InputValidationError(f"bad parameters for {family}: {e}") from e
    return [margin] * repeat


# Distribution function and quasi-inverse

def _check_probabilities(u: np.ndarray):
    if np.any(np.isnan(u)) or np.any(u < 0.0) or np.any(u > 1.0):
        raise InputValidationError("probabilities must lie in [0, 1]")


def quantile(m: Margin, u: ArrayLike) -> Union[float, np.ndarray]:
    """
    Left-continuous quasi-inverse of F.

    Args:
        m: the margin
        u: probability or array of probabilities in [0, 1]

    Returns:
        inf{x : F(x) >= u} for u in (0, 1], inf{x : F(x) > 0} for u = 0.
        Unbounded families return +/-inf at u = 1 / u = 0.
    """
    arr = np.asarray(u, dtype=float)
    _check_probabilities(arr)
    if m.is_discrete:
        values, cum = m._atoms
        idx = np.searchsorted(cum, arr, side="left")
        out = values[np.clip(idx, 0, len(values) - 1)]
    else:
        out = np.asarray(m._frozen.ppf(arr), dtype=float)
    return float(out) if out.ndim == 0 else out


def cdf(m: Margin, x: ArrayLike) -> Union[float, np.ndarray]:
    """Right-continuous distribution function F(x) = P(X <= x)."""
    arr = np.asarray(x, dtype=float)
    if m.is_discrete:
        values, cum = m._atoms
        k = np.searchsorted(values, arr, side="right")
        out = np.where(k > 0, cum[np.maximum(k - 1, 0)], 0.0)
    else:
        out = np.asarray(m._frozen.cdf(arr), dtype=float)
    return float(out) if out.ndim == 0 else out


def density(m: Margin, x: ArrayLike) -> Union[float, np.ndarray]:
    """Lebesgue density of a continuous margin."""
    if m.is_discrete:
        raise InputValidationError(f"{m} has no density")
    out = np.asarray(m._frozen.pdf(np.asarray(x, dtype=float)), dtype=float)
    return float(out) if out.ndim == 0 else out


def support(m: Margin) -> Tuple[float, float]:
    """(a, b) = (sup{x: F(x)=0}, inf{x: F(x)=1})."""
    if m.is_discrete:
        values, _ = m._atoms
        return float(values[0]), float(values[-1])
    lo, hi = m._frozen.support()
    return float(lo), float(hi)


def center(m: Margin) -> float:
    """Symmetry center of a unimodal-symmetric margin."""
    if m.family == "uniform":
        return 0.5 * (m.params[0] + m.params[1])
    if m.family in ("normal", "cauchy"):
        return m.params[0]
    raise InputValidationError(f"{m} is not unimodal-symmetric")


# Moments and support summary

@dataclass(frozen=True)
class SupportSummary:
    a: float
    b: float
    length: float
    mean: Optional[float]
    abs_dev: Optional[float]
    sd: Optional[float]
    zero_mass: float      # 1 - F(F^{-1}(0)): mass strictly above the essential infimum
    below_sup: float      # F(b-): mass strictly below the essential supremum

    def to_dict(self) -> Dict[str, Optional[float]]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _quantile_scale_abs_dev(m: Margin, mean: float) -> float:
    """E|X - mean| = int_0^1 |F^{-1}(u) - mean| du, split where F^{-1} crosses the mean."""
    split = float(cdf(m, mean))
    ppf = m._frozen.ppf
    opts = dict(epsrel=QUAD_EPSREL, epsabs=0.0, limit=200)
    below, _ = integrate.quad(lambda u: mean - ppf(u), 0.0, split, **opts) if split > 0 else (0.0, 0.0)
    above, _ = integrate.quad(lambda u: ppf(u) - mean, split, 1.0, **opts) if split < 1 else (0.0, 0.0)
    return below + above


def support_summary(m: Margin) -> SupportSummary:
    """
    Support ends, moments and the boundary masses used by the pairwise
    countermonotonicity conditions. Undefined moments are None.
    """
    a, b = support(m)
    if m.is_discrete:
        values, cum = m._atoms
        probs = np.diff(np.concatenate(([0.0], cum)))
        mean = float(np.dot(probs, values))
        abs_dev = float(np.dot(probs, np.abs(values - mean)))
        sd = float(math.sqrt(max(np.dot(probs, (values - mean) ** 2), 0.0)))
        zero_mass = float(1.0 - cum[0])
        below_sup = float(cum[-2]) if len(cum) > 1 else 0.0
        return SupportSummary(a, b, b - a, mean, abs_dev, sd, zero_mass, below_sup)

    if m.family == "cauchy":
        return SupportSummary(a, b, math.inf, None, None, None, 1.0, 1.0)

    mean = float(m._frozen.mean())
    sd = float(m._frozen.std())
    if m.family == "normal":
        abs_dev = m.params[1] * math.sqrt(2.0 / math.pi)
    elif m.family == "uniform":
        abs_dev = 0.25 * (b - a)
    elif m.family == "exponential":
        abs_dev = 2.0 / (math.e * m.params[0])
    elif not math.isfinite(mean):
        abs_dev = math.inf
    else:
        abs_dev = _quantile_scale_abs_dev(m, mean)
    return SupportSummary(a, b, b - a, mean, abs_dev, sd, 1.0, 1.0)


# Grids

@dataclass(frozen=True, eq=False)
class QuantileGrid:
    """
    n equal-weight quantiles of a margin, optionally restricted to the
    probability window [window[0], window[1]].
    """
    values: np.ndarray
    mode: str
    source: Optional[Margin] = None
    window: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def spread(self) -> float:
        return float(self.values[-1] - self.values[0])


def grid_probabilities(n: int, mode: str = DEFAULT_GRID_MODE) -> np.ndarray:
    """Grid positions u_1..u_n in (0,1) (lower includes 0, upper includes 1)."""
    if mode not in GRID_MODES:
        raise InputValidationError(f"grid mode must be one of {GRID_MODES}, got {mode!r}")
    i = np.arange(1, n + 1, dtype=float)
    if mode == "lower":
        return (i - 1.0) / n
    if mode == "upper":
        return i / n
    if mode == "midpoint":
        return (i - 0.5) / n
    return i / (n + 1.0)


def conditional_grid(m: Margin, lo: float, hi: float, count: int,
                     mode: str = DEFAULT_GRID_MODE) -> QuantileGrid:
    """
    Discretize the part of m between probability levels lo and hi.

    Args:
        m: the margin
        lo, hi: probability window, 0 <= lo < hi <= 1
        count: number of grid points
        mode: grid mode applied inside the window

    Returns:
        QuantileGrid with nondecreasing finite values
    """
    if isinstance(count, bool) or int(count) != count or count < 1:
        raise InputValidationError(f"grid size must be a positive integer, got {count}")
    if not 0.0 <= lo < hi <= 1.0:
        raise InputValidationError(f"probability window must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})")
    u = lo + (hi - lo) * grid_probabilities(int(count), mode)
    if lo == 0.0 and mode == "lower":
        u[0] = 0.0
    if hi == 1.0 and mode == "upper":
        u[-1] = 1.0
    values = np.asarray(quantile(m, np.clip(u, 0.0, 1.0)), dtype=float)
    if not np.all(np.isfinite(values)):
        raise InfeasibleError(
            f"grid mode {mode!r} on window ({lo}, {hi}) hits an unbounded end of {m}")
    # ppf round-off can break monotonicity by an ulp
    values = np.maximum.accumulate(values)
    return QuantileGrid(values, mode, m, (lo, hi))


def discretize(m: Margin, n: int, mode: str = DEFAULT_GRID_MODE) -> QuantileGrid:
    """n-point equal-weight quantile column of m."""
    return conditional_grid(m, 0.0, 1.0, n, mode)


def column_grid(values: Sequence[float]) -> QuantileGrid:
    """
    Treat a raw column as the empirical law of its values. The shifted grid
    of an empirical margin reproduces the sorted sample exactly.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or len(values) == 0:
        raise InputValidationError("a column needs at least one value")
    return discretize(empirical(values), len(values), "shifted")


def discretize_all(margins: Sequence[Margin], n: int, mode: str = DEFAULT_GRID_MODE) -> List[QuantileGrid]:
    grids = [discretize(m, n, mode) for m in margins]
    logger.debug("discretized %d margins at n=%d (%s)", len(grids), n, mode)
    return grids
