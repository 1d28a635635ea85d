"""
RunConfig: one JSON document describing a run, with command-line overrides.
"""
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np

from core.engine import (CostSpec, RaOptions, convex_of_sum, product,
                         stop_loss, variance_of_sum)
from core.couplings import COUPLING_KINDS
from core.errors import ConfigError, FrechetError
from core.marginals import GRID_MODES, Margin, margin_from_config

logger = logging.getLogger(__name__)

CONFIG_KEYS = ("margins", "n", "grid_mode", "seed", "restarts", "tolerance", "max_sweeps",
               "alpha", "k", "cost", "kind", "d")
COST_NAMES = ("variance", "product", "stop_loss", "square", "exp")

# Flags that may override a config field
OVERRIDES = ("n", "seed", "restarts", "grid_mode", "tolerance", "alpha", "k", "kind")


@dataclass(frozen=True)
class RunConfig:
    margins: Tuple[Margin, ...] = ()
    n: int = 1000
    grid_mode: str = "midpoint"
    seed: int = 0
    restarts: int = 20
    tolerance: float = 1e-9
    max_sweeps: int = 1000
    alpha: Optional[float] = None
    k: Optional[float] = None
    cost: Optional[Dict[str, Any]] = None
    kind: Optional[str] = None
    d: Optional[int] = None

    @property
    def ra_options(self) -> RaOptions:
        return RaOptions(max_sweeps=self.max_sweeps, restarts=self.restarts, seed=self.seed)

    def cost_spec(self) -> CostSpec:
        return cost_from_config(self.cost or {"kind": "variance"})

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["margins"] = [str(m) for m in self.margins]
        return out


def cost_from_config(entry: Dict[str, Any]) -> CostSpec:
    """{"kind": variance | product | stop_loss | square | exp, "strike": k}"""
    if not isinstance(entry, dict):
        raise ConfigError("cost must be an object")
    extra = sorted(set(entry) - {"kind", "strike"})
    if extra:
        raise ConfigError(f"unknown cost keys {extra}")
    kind = entry.get("kind")
    if kind == "variance":
        return variance_of_sum()
    if kind == "product":
        return product()
    if kind == "square":
        return convex_of_sum(np.square, "square")
    if kind == "exp":
        return convex_of_sum(np.exp, "exp")
    if kind == "stop_loss":
        strike = entry.get("strike")
        if not isinstance(strike, (int, float)) or isinstance(strike, bool):
            raise ConfigError("stop_loss cost needs a numeric strike")
        return stop_loss(strike)
    raise ConfigError(f"cost kind must be one of {COST_NAMES}, got {kind!r}")


def _check_int(name: str, value: Any, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return value


def _check_number(name: str, value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    return float(value)


def parse_config(doc: Dict[str, Any]) -> RunConfig:
    """
    Validate a config document and build the RunConfig.

    Args:
        doc: parsed JSON object

    Returns:
        RunConfig with margins already constructed

    Raises:
        ConfigError on unknown keys or invalid values
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")

    margins = []
    for i, entry in enumerate(doc.get("margins", [])):
        try:
            margins.extend(margin_from_config(entry))
        except FrechetError as e:
            raise ConfigError(f"margin {i}: {e}") from e

    values: Dict[str, Any] = {"margins": tuple(margins)}
    if "n" in doc:
        values["n"] = _check_int("n", doc["n"], 1)
    if "seed" in doc:
        values["seed"] = _check_int("seed", doc["seed"], 0)
    if "restarts" in doc:
        values["restarts"] = _check_int("restarts", doc["restarts"], 1)
    if "max_sweeps" in doc:
        values["max_sweeps"] = _check_int("max_sweeps", doc["max_sweeps"], 1)
    if "d" in doc:
        values["d"] = _check_int("d", doc["d"], 1)
    if "grid_mode" in doc:
        values["grid_mode"] = doc["grid_mode"]
    for key in ("tolerance", "alpha", "k"):
        if doc.get(key) is not None:
            values[key] = _check_number(key, doc[key])
    if "cost" in doc:
        cost_from_config(doc["cost"])
        values["cost"] = dict(doc["cost"])
    if "kind" in doc:
        values["kind"] = doc["kind"]
    return validate(RunConfig(**values))


def validate(config: RunConfig) -> RunConfig:
    if config.grid_mode not in GRID_MODES:
        raise ConfigError(f"grid_mode must be one of {GRID_MODES}, got {config.grid_mode!r}")
    if config.tolerance <= 0:
        raise ConfigError(f"tolerance must be positive, got {config.tolerance}")
    if config.alpha is not None and not 0.0 < config.alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {config.alpha}")
    if config.kind is not None and config.kind not in COUPLING_KINDS:
        raise ConfigError(f"kind must be one of {COUPLING_KINDS}, got {config.kind!r}")
    return config


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Command-line flags win over config fields; None means not given."""
    given = {k: v for k, v in overrides.items() if k in OVERRIDES and v is not None}
    if not given:
        return config
    logger.debug("overriding config fields %s", sorted(given))
    try:
        updated = replace(config, **given)
        for name, minimum in (("n", 1), ("seed", 0), ("restarts", 1)):
            _check_int(name, getattr(updated, name), minimum)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return validate(updated)


def load_config(file_path: Optional[str]) -> RunConfig:
    """Read the config from file_path, or from stdin when file_path is None or "-"."""
    try:
        if file_path in (None, "-"):
            text = sys.stdin.read()
        else:
            with open(file_path, "r", encoding="utf-8") as f:
                text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {file_path}: {e}") from e
    if not text.strip():
        return validate(RunConfig())
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return parse_config(doc)
