import json
import logging
import math
import os
import sys
from typing import Any, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

THREADS_ENV = "FRECHET_THREADS"


def to_jsonable(obj: Any) -> Any:
    """
    Convert results to plain JSON types. Non-finite floats become the strings
    "inf", "-inf" and "nan" so the output stays strict JSON.
    """
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def dump_json(payload: Any) -> str:
    """Deterministic JSON text (sorted keys, fixed indentation)."""
    return json.dumps(to_jsonable(payload), indent=2, sort_keys=True) + "\n"


def write_json(file_path: Optional[str], payload: Any) -> bool:
    """
    Write payload as JSON to file_path, or to stdout when file_path is None or "-".
    """
    text = dump_json(payload)
    if file_path in (None, "-"):
        sys.stdout.write(text)
        return True
    try:
        with open(file_path, "w", encoding="utf-8") as f:
            f.write(text)
        return True
    except OSError as e:
        logger.error("Error writing JSON %s: %s", file_path, e)
        return False


def write_matrix_csv(file_path: str, values: np.ndarray) -> bool:
    """
    Write an n x d matrix as CSV: one row per line, d comma-separated values,
    no header. Floats use repr so the file re-parses to identical values.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    try:
        with open(file_path, "w", encoding="utf-8") as f:
            for row in values:
                f.write(",".join(repr(float(v)) for v in row) + "\n")
        return True
    except OSError as e:
        logger.error("Error writing matrix %s: %s", file_path, e)
        return False


def read_matrix_csv(file_path: str) -> Optional[np.ndarray]:
    """Read a matrix written by write_matrix_csv; None if unreadable."""
    try:
        rows: List[List[float]] = []
        with open(file_path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    rows.append([float(v) for v in line.split(",")])
    except (OSError, ValueError) as e:
        logger.error("Error reading matrix %s: %s", file_path, e)
        return None
    if not rows or len({len(r) for r in rows}) != 1:
        logger.error("Matrix file %s is empty or ragged", file_path)
        return None
    return np.asarray(rows, dtype=float)


def matrix_to_json(values: np.ndarray) -> dict:
    """{n, d, columns} with column-major values."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    n, d = values.shape
    return {"n": n, "d": d, "columns": [values[:, j].tolist() for j in range(d)]}


def write_plot_csv(file_path: str, values: np.ndarray) -> bool:
    """
    Plot data for rearrangement scatter plots: header u,f1,...,fd, then one
    line per row with u_i = (i - 0.5)/n and each column's normalized rank.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    n, d = values.shape
    ranks = np.empty_like(values)
    for j in range(d):
        order = np.argsort(values[:, j], kind="stable")
        ranks[order, j] = (np.arange(n) + 0.5) / n
    u = (np.arange(n) + 0.5) / n
    try:
        with open(file_path, "w", encoding="utf-8") as f:
            f.write(",".join(["u"] + [f"f{j + 1}" for j in range(d)]) + "\n")
            for i in range(n):
                f.write(",".join(repr(float(v)) for v in (u[i], *ranks[i])) + "\n")
        return True
    except OSError as e:
        logger.error("Error writing plot data %s: %s", file_path, e)
        return False


def read_values_file(file_path: str) -> Optional[List[float]]:
    """One value per line; blank lines and '#' comments are skipped."""
    try:
        with open(file_path, "r", encoding="utf-8") as f:
            return [float(line.split("#")[0]) for line in f if line.split("#")[0].strip()]
    except (OSError, ValueError) as e:
        logger.error("Error reading values %s: %s", file_path, e)
        return None


def thread_count(default: Optional[int] = None) -> int:
    """Worker cap from FRECHET_THREADS, else the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning("Ignoring non-integer %s=%r", THREADS_ENV, raw)
    return max(1, default or os.cpu_count() or 1)


def seed_streams(seed: int, count: int) -> List[np.random.Generator]:
    """Independent per-restart generators derived from one seed."""
    children = np.random.SeedSequence(int(seed) & (2 ** 64 - 1)).spawn(count)
    return [np.random.default_rng(child) for child in children]


def sorted_equal(a: Sequence[float], b: Sequence[float]) -> bool:
    """Exact multiset equality of two columns."""
    a, b = np.sort(np.asarray(a, dtype=float)), np.sort(np.asarray(b, dtype=float))
    return a.shape == b.shape and bool(np.array_equal(a, b))
