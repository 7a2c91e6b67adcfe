"""Input validation helpers shared by the public functions."""
from __future__ import annotations

import numpy as np


def check_function(f, n_atoms: int) -> np.ndarray:
    f = np.asarray(f, dtype=float).reshape(-1)
    if f.shape[0] != n_atoms:
        raise ValueError(f"function has {f.shape[0]} values, expected {n_atoms}")
    if not np.all(np.isfinite(f)):
        raise ValueError("function values must be finite")
    return f


def check_product_function(F, shape) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if F.shape != tuple(shape):
        raise ValueError(f"product function has shape {F.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(F)):
        raise ValueError("function values must be finite")
    return F


def check_compatible(mu, grid) -> None:
    if mu.dim != grid.dim or mu.depth != grid.depth:
        raise ValueError(f"measure (dim={mu.dim}, depth={mu.depth}) and grid "
                         f"(dim={grid.dim}, depth={grid.depth}) do not share a lattice")


def check_nonnegative(x, name="weights") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError(f"negative {name}")
    return x


def check_seed(seed):
    if seed is None:
        raise ValueError("a seed is required for randomized runs")
    return int(seed)
