"""Brute-force references over all column permutations (small n only)."""
import itertools

import numpy as np


def all_permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=int)


def brute_force_min_variance(columns) -> float:
    """Exact minimum population variance of the row sum over all column permutations (d <= 3)."""
    columns = [np.asarray(c, dtype=float) for c in columns]
    perms = all_permutations(len(columns[0]))
    if len(columns) == 2:
        sums = columns[0][None, :] + columns[1][perms]
    else:
        partial = columns[0][None, :] + columns[1][perms]
        sums = partial[:, None, :] + columns[2][perms][None, :, :]
    return float(np.min(np.var(sums, axis=-1)))


def brute_force_min_product(columns) -> float:
    """Exact minimum mean row product over all column permutations (d <= 3)."""
    columns = [np.asarray(c, dtype=float) for c in columns]
    perms = all_permutations(len(columns[0]))
    prods = columns[0][None, :] * columns[1][perms]
    if len(columns) == 3:
        prods = prods[:, None, :] * columns[2][perms][None, :, :]
    return float(np.min(np.mean(prods, axis=-1)))
