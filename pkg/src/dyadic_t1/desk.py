"""Desk-scale profile and seeded corpora shared by the CLI, calibration and tests."""
from __future__ import annotations

import numpy as np

from .czop import Composite, HaarMultiplier, TensorKernel
from .grid import random_grid
from .haar import FactorSystem
from .measure import PowerLaw, generate_measure, verify_upper_doubling
from .spaces import ProductSystem

# r and the badness constant are chosen so that good windows are non-empty at
# 2**8 atoms per axis; the constant 4 leaves nothing good at this depth.
DESK = {"N": 8, "r": 2, "gam": 0.25, "bad_const": 0.125, "alpha": 1.0, "beta": 1.0}

MEASURE_KINDS = ("uniform", "random_iid", "random_int", "cantor_like", "point_masses")


def seeds(seed, n: int) -> list[int]:
    """n independent child seeds of ``seed``."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def measure(kind: str, seed, N: int = DESK["N"]):
    side = 2 ** N
    if kind == "random_iid":
        return generate_measure(kind, seed, N, zero_prob=0.2)
    if kind == "random_int":
        return generate_measure(kind, seed, N, high=9, zero_prob=0.25)
    if kind == "cantor_like":
        return generate_measure(kind, seed, N, p=0.25)
    if kind == "point_masses":
        # heavy atoms on a thin background: far from doubling
        rng = np.random.default_rng(seed)
        idx = rng.choice(side, size=4, replace=False)
        masses = [(int(i), int(m)) for i, m in zip(idx, (5000, 800, 60, 7))]
        return generate_measure(kind, seed, N, masses=masses, background=1)
    return generate_measure(kind, seed, N)


def measure_corpus(seed, N: int = DESK["N"], kinds=MEASURE_KINDS) -> list:
    return [(k, measure(k, s, N)) for k, s in zip(kinds, seeds(seed, len(kinds)))]


def product_system(mu_1, mu_2, seed, r=DESK["r"], gam=DESK["gam"],
                   bad_const=DESK["bad_const"]) -> ProductSystem:
    """Factor systems over four independent random grids D_n, D'_n, D_m, D'_m."""
    s = seeds(seed, 4)
    g1, g1p = random_grid(mu_1.dim, s[0], mu_1.depth), random_grid(mu_1.dim, s[1], mu_1.depth)
    g2, g2p = random_grid(mu_2.dim, s[2], mu_2.depth), random_grid(mu_2.dim, s[3], mu_2.depth)
    kw = dict(r=r, gam=gam, bad_const=bad_const)
    return ProductSystem(FactorSystem(mu_1, g1, g1p, **kw), FactorSystem(mu_2, g2, g2p, **kw))


def dominating_power_law(mu) -> PowerLaw:
    """lambda = C r with the smallest C making mu upper doubling on the mesh."""
    ratio = verify_upper_doubling(mu, PowerLaw(1.0, 1.0, mu.dim)).max_ratio
    return PowerLaw(max(ratio, 1e-12), 1.0, mu.dim)


def tensor_kernel(mu_1, mu_2, pv: bool = True, normalize: bool = True) -> TensorKernel:
    lam_1, lam_2 = dominating_power_law(mu_1), dominating_power_law(mu_2)
    T = TensorKernel(mu_1, mu_2, lam_1, lam_2, pv=pv)
    if normalize:
        T.scale = 1.0 / (T.norm_bound() or 1.0)
    return T


def composite_operator(psys: ProductSystem, seed, kernel_weight: float = 0.5) -> Composite:
    """Random Haar multiplier plus a normalized principal-value tensor kernel."""
    H = HaarMultiplier.random(psys, seed)
    K = tensor_kernel(psys.sys_1.mu, psys.sys_2.mu)
    K.scale *= kernel_weight
    return Composite([H, K])


def random_sign_function(shape, seed) -> np.ndarray:
    return np.random.default_rng(seed).choice([-1.0, 1.0], size=shape)


def random_window_coefficients(psys: ProductSystem, seed, density: float = 0.05):
    """Sparse heavy-tailed coefficients on the good window."""
    rng = np.random.default_rng(seed)
    C = rng.standard_t(3, size=psys.window.shape) * (rng.random(psys.window.shape) < density)
    return C * psys.window
