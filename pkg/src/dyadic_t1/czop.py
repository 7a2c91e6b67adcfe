"""Model bi-parameter operators, testing conditions, coefficient bounds and Schur tests.

Functions on the product domain are (n1, n2) arrays over flat atom indices.
An operator acts by (Tf)(x) = sum_y K(x, y) f(y) mu(y), so that
<Tf, g> = sum_x (Tf)(x) g(x) mu(x).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import DyadicCube, ShiftedDyadicGrid, classify_pair, PairClass, SEP_CONST
from .haar import FactorSystem
from .measure import AtomicMeasure, DominatingFunction, PowerLaw, Tabulated
from .spaces import ProductSystem, OmegaSet, bmo_prod_estimate, enlarged_atoms
from .paraproduct import operator_norm


class OperatorError(ValueError):
    pass


# -- one-dimensional kernels ---------------------------------------------------


def cz_kernel_matrix(mu: AtomicMeasure, lam: DominatingFunction, pv: bool = True) -> np.ndarray:
    """k(x, y) = sign(x - y) / lambda(x, |x - y|) on the atoms of a 1-D measure.

    The diagonal is 0 under the principal-value convention and NaN otherwise.
    """
    if mu.dim != 1:
        raise OperatorError("model kernels are one-dimensional per factor")
    x = mu.coords().reshape(-1)
    diff = x[:, None] - x[None, :]
    r = np.abs(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam_v = lam(x[:, None, None], np.where(r > 0, r, mu.spacing))
        k = np.sign(diff) / lam_v
    np.fill_diagonal(k, 0.0 if pv else np.nan)
    return k


class ModelOperator:
    """Base: apply, adjoint, partial adjoint and pairing on product functions."""

    shape: tuple
    weights: np.ndarray

    def apply(self, F) -> np.ndarray:
        raise NotImplementedError

    def adjoint_apply(self, G) -> np.ndarray:
        raise NotImplementedError

    def partial_adjoint(self) -> "ModelOperator":
        raise NotImplementedError

    def adjoint(self) -> "ModelOperator":
        return _Adjoint(self)

    def pairing(self, F, G) -> float:
        return float((self.apply(F) * np.asarray(G, dtype=float) * self.weights).sum())

    def norm(self, tol: float = 1e-8) -> float:
        return operator_norm(self.apply, self.adjoint_apply, self.weights, tol=tol)

    def norm_bound(self) -> float:
        """An upper bound for the L2(mu) operator norm."""
        return self.norm()

    def dense(self) -> np.ndarray:
        """Matrix M with (Tf)(x) = sum_y M[x, y] f(y) mu(y); small domains only."""
        n1, n2 = self.shape
        if n1 * n2 > 4096:
            raise OperatorError("dense form only for small domains")
        W = self.weights.reshape(-1)
        M = np.zeros((n1 * n2, n1 * n2))
        for j in range(n1 * n2):
            if W[j] == 0:
                continue
            e = np.zeros(n1 * n2)
            e[j] = 1.0 / W[j]
            M[:, j] = self.apply(e.reshape(n1, n2)).reshape(-1)
        return M


class _Adjoint(ModelOperator):
    def __init__(self, op):
        self.op, self.shape, self.weights = op, op.shape, op.weights

    def apply(self, F):
        return self.op.adjoint_apply(F)

    def adjoint_apply(self, G):
        return self.op.apply(G)

    def partial_adjoint(self):
        return _Adjoint(self.op.partial_adjoint())


class TensorKernel(ModelOperator):
    """K(x, y) = k1(x1, y1) k2(x2, y2) with the model kernel on each axis."""

    def __init__(self, mu_1: AtomicMeasure, mu_2: AtomicMeasure, lam_1: DominatingFunction,
                 lam_2: DominatingFunction, pv: bool = False, k1=None, k2=None, scale: float = 1.0):
        self.mu_1, self.mu_2 = mu_1, mu_2
        self.lam_1, self.lam_2 = lam_1, lam_2
        self.pv = pv
        self.k1 = cz_kernel_matrix(mu_1, lam_1, pv) if k1 is None else np.asarray(k1, dtype=float)
        self.k2 = cz_kernel_matrix(mu_2, lam_2, pv) if k2 is None else np.asarray(k2, dtype=float)
        self.scale = float(scale)
        self.w1 = mu_1.flat.astype(float)
        self.w2 = mu_2.flat.astype(float)
        self.shape = (len(self.w1), len(self.w2))
        self.weights = np.multiply.outer(self.w1, self.w2)

    def _safe(self, k):
        return np.nan_to_num(k, nan=0.0)

    def kernel(self, x1, x2, y1, y2):
        k = self.scale * self.k1[x1, y1] * self.k2[x2, y2]
        if not self.pv and (np.any(np.asarray(x1) == np.asarray(y1)) or
                            np.any(np.asarray(x2) == np.asarray(y2))):
            raise OperatorError("kernel evaluated on a diagonal")
        return k

    def _check_supports(self, F, G):
        if self.pv:
            return
        F, G = np.asarray(F), np.asarray(G)
        fr, fc = np.any(F != 0, axis=1), np.any(F != 0, axis=0)
        gr, gc = np.any(G != 0, axis=1), np.any(G != 0, axis=0)
        if np.any(fr & gr) or np.any(fc & gc):
            raise OperatorError("supports meet a diagonal; use pv=True or disjoint factors")

    def apply(self, F) -> np.ndarray:
        F = np.asarray(F, dtype=float)
        return self.scale * self._safe(self.k1) @ (F * self.weights) @ self._safe(self.k2).T

    def adjoint_apply(self, G) -> np.ndarray:
        G = np.asarray(G, dtype=float)
        return self.scale * self._safe(self.k1).T @ (G * self.weights) @ self._safe(self.k2)

    def pairing(self, F, G) -> float:
        self._check_supports(F, G)
        return super().pairing(F, G)

    def pairing_tensor(self, f1, f2, g1, g2) -> float:
        """<T(f1 x f2), g1 x g2> as a product of one-dimensional pairings."""
        f1, f2, g1, g2 = (np.asarray(v, dtype=float) for v in (f1, f2, g1, g2))
        if not self.pv and (np.any((f1 != 0) & (g1 != 0)) or np.any((f2 != 0) & (g2 != 0))):
            raise OperatorError("tensor factors not disjointly supported")
        p1 = (g1 * self.w1) @ self._safe(self.k1) @ (f1 * self.w1)
        p2 = (g2 * self.w2) @ self._safe(self.k2) @ (f2 * self.w2)
        return float(self.scale * p1 * p2)

    def norm_bound(self) -> float:
        # the norm of a tensor product is the product of the factor norms
        return abs(self.scale) * _weighted_norm(self.k1, self.w1) * _weighted_norm(self.k2, self.w2)

    def partial_adjoint(self) -> "TensorKernel":
        return TensorKernel(self.mu_1, self.mu_2, self.lam_1, self.lam_2, self.pv,
                            k1=self.k1.T, k2=self.k2, scale=self.scale)

    def adjoint(self) -> "TensorKernel":
        return TensorKernel(self.mu_1, self.mu_2, self.lam_1, self.lam_2, self.pv,
                            k1=self.k1.T, k2=self.k2.T, scale=self.scale)

    def symmetries(self) -> dict:
        """Kernels of T*, T_1 and T_1* as factor pairs."""
        return {"K": (self.k1, self.k2), "K*": (self.k1.T, self.k2.T),
                "K1": (self.k1.T, self.k2), "K1*": (self.k1, self.k2.T)}


class HaarMultiplier(ModelOperator):
    """T f = sum over window R of eps_R <f, h_R> h_R, with |eps_R| <= 1."""

    def __init__(self, psys: ProductSystem, eps):
        eps = np.asarray(eps, dtype=float)
        if eps.shape != psys.window.shape:
            raise OperatorError("eps must have one entry per product Haar function")
        if np.any(np.abs(eps) > 1):
            raise OperatorError("multiplier entries must satisfy |eps| <= 1")
        self.psys = psys
        self.eps = eps * psys.window
        self.shape = psys.shape
        self.weights = psys.weights()

    @classmethod
    def random(cls, psys: ProductSystem, seed, low: float = -1.0, high: float = 1.0):
        rng = np.random.default_rng(seed)
        return cls(psys, rng.uniform(low, high, psys.window.shape))

    @property
    def exact_norm(self) -> float:
        return float(np.abs(self.eps).max()) if self.eps.size else 0.0

    def apply(self, F) -> np.ndarray:
        return self.psys.synthesize(self.psys.coefficients(F) * self.eps)

    def adjoint_apply(self, G) -> np.ndarray:
        return self.apply(G)

    def norm_bound(self) -> float:
        return self.exact_norm

    def partial_adjoint(self) -> "HaarMultiplier":
        # h_I(x1) h_I(y1) is symmetric, so transposing the first variable changes nothing
        return self


class Composite(ModelOperator):
    def __init__(self, parts):
        parts = list(parts)
        if not parts:
            raise OperatorError("empty composite")
        self.parts = parts
        self.shape = parts[0].shape
        self.weights = parts[0].weights

    def apply(self, F):
        return sum(p.apply(F) for p in self.parts)

    def adjoint_apply(self, G):
        return sum(p.adjoint_apply(G) for p in self.parts)

    def norm_bound(self) -> float:
        return sum(p.norm_bound() for p in self.parts)

    def partial_adjoint(self):
        return Composite([p.partial_adjoint() for p in self.parts])


def _weighted_norm(k, w) -> float:
    """Norm of f -> k (f w) on L2(w), via the symmetric scaling by sqrt(w)."""
    s = np.sqrt(np.asarray(w, dtype=float))
    return float(np.linalg.norm(s[:, None] * np.nan_to_num(k) * s[None, :], 2))


def pairing(T: ModelOperator, F, G) -> float:
    return T.pairing(F, G)


def partial_adjoint_residual(T: ModelOperator, f1, f2, g1, g2) -> float:
    """<T_1(f1 x f2), g1 x g2> - <T(g1 x f2), f1 x g2>."""
    T1 = T.partial_adjoint()
    a = T1.pairing(np.multiply.outer(f1, f2), np.multiply.outer(g1, g2))
    b = T.pairing(np.multiply.outer(g1, f2), np.multiply.outer(f1, g2))
    return float(a - b)


# -- standard estimates ----------------------------------------------------------


def _sample_config(rng, n):
    """x, y, y' on a 1-D lattice with 0 < |y - y'| <= |x - y| / 2."""
    while True:
        x, y = rng.integers(n, size=2)
        if x == y:
            continue
        dmax = abs(int(x) - int(y)) // 2
        if dmax == 0:
            continue
        step = int(rng.integers(1, dmax + 1)) * (1 if rng.random() < 0.5 else -1)
        yp = int(y) + step
        if 0 <= yp < n:
            return int(x), int(y), yp


def verify_standard_estimates(T: TensorKernel, samples: int = 2000, seed=0,
                              alpha: float = 1.0, beta: float = 1.0) -> dict:
    """Worst ratios of each standard estimate for K, K*, K1 and K1*."""
    rng = np.random.default_rng(seed)
    n1, n2 = T.shape
    h1, h2 = T.mu_1.spacing, T.mu_2.spacing
    out = {}
    for name, (a, b) in T.symmetries().items():
        worst = {"size": 0.0, "holder": 0.0, "mixed_1": 0.0, "mixed_2": 0.0}
        for _ in range(samples):
            x1, y1, y1p = _sample_config(rng, n1)
            x2, y2, y2p = _sample_config(rng, n2)
            r1, r2 = abs(x1 - y1) * h1, abs(x2 - y2) * h2
            l1 = float(T.lam_1(np.array([x1 * h1]), r1))
            l2 = float(T.lam_2(np.array([x2 * h2]), r2))
            s1 = (abs(y1 - y1p) * h1 / r1) ** alpha
            s2 = (abs(y2 - y2p) * h2 / r2) ** beta
            k = a[x1, y1] * b[x2, y2] * T.scale
            worst["size"] = max(worst["size"], abs(k) * l1 * l2)
            dd = T.scale * (a[x1, y1] - a[x1, y1p]) * (b[x2, y2] - b[x2, y2p])
            worst["holder"] = max(worst["holder"], abs(dd) * l1 * l2 / (s1 * s2))
            m1 = T.scale * (a[x1, y1] - a[x1, y1p]) * b[x2, y2]
            worst["mixed_1"] = max(worst["mixed_1"], abs(m1) * l1 * l2 / s1)
            m2 = T.scale * a[x1, y1] * (b[x2, y2] - b[x2, y2p])
            worst["mixed_2"] = max(worst["mixed_2"], abs(m2) * l1 * l2 / s2)
        out[name] = worst
    return out


# -- coefficient bounds ------------------------------------------------------------


def _real(cube: DyadicCube, mu: AtomicMeasure):
    return cube.side * mu.spacing


def sup_lambda(lam: DominatingFunction, mu: AtomicMeasure, cube: DyadicCube, r) -> float:
    atoms = cube.atoms(mu.side)
    if len(atoms) == 0:
        raise OperatorError("cube has no atoms in the box")
    pts = mu.coords().reshape(mu.n_atoms, mu.dim)[atoms]
    return float(np.max(lam(pts, np.full(len(atoms), r))))


def a_sep_formula(l1, l2, d, lam_sup, m1, m2, alpha) -> float:
    D = l1 + l2 + d
    return (l1 ** (alpha / 2) * l2 ** (alpha / 2) / (D ** alpha * lam_sup)) * (m1 * m2) ** 0.5


def a_in_formula(l1, l2, m1, m21, beta) -> float:
    if m21 == 0:
        return 0.0
    return (l1 / l2) ** (beta / 2) * (m1 / m21) ** 0.5


def a_sep(I1: DyadicCube, I2: DyadicCube, alpha: float, lam: DominatingFunction,
          mu: AtomicMeasure) -> float:
    l1, l2 = _real(I1, mu), _real(I2, mu)
    if l1 > l2:
        raise OperatorError("a_sep needs l(I1) <= l(I2)")
    d = float(I1.dist(I2)) * mu.spacing
    w = mu.flat
    m1, m2 = w[I1.atoms(mu.side)].sum(), w[I2.atoms(mu.side)].sum()
    return a_sep_formula(l1, l2, d, sup_lambda(lam, mu, I1, l1 + l2 + d), m1, m2, alpha)


def containing_child(J1: DyadicCube, J2: DyadicCube):
    for ch in J2.children():
        if ch.contains(J1):
            return ch
    return None


def a_in(J1: DyadicCube, J2: DyadicCube, beta: float, mu: AtomicMeasure, r: int = 1) -> float:
    if not J1.side * 2 ** r < J2.side:
        raise OperatorError("a_in needs l(J1) < 2**-r l(J2)")
    ch = containing_child(J1, J2)
    if ch is None:
        raise OperatorError("J1 is not inside a child of J2")
    w = mu.flat
    m1, m21 = w[J1.atoms(mu.side)].sum(), w[ch.atoms(mu.side)].sum()
    return a_in_formula(_real(J1, mu), _real(J2, mu), m1, m21, beta)


# -- Schur matrices (one-dimensional factors) -------------------------------------


def _interval_mass(mu: AtomicMeasure, lo, hi):
    cs = np.concatenate([[0.0], np.cumsum(mu.flat.astype(float))])
    a = np.clip(lo, 0, mu.side)
    b = np.clip(hi, 0, mu.side)
    return cs[b] - cs[a]


def _cube_sup_lambda(lam, mu, grid, radii):
    """sup over atoms of each cube of lambda(z, radii[cube, j])."""
    lo = np.clip(grid.cube_corners[:, 0], 0, mu.side)
    hi = np.clip(grid.cube_corners[:, 0] + grid.cube_sides, 0, mu.side)
    if isinstance(lam, PowerLaw):
        return lam(np.zeros((1, 1)), radii)
    if isinstance(lam, Tabulated):
        k = lam._radius_index(radii)
        K = lam.values.shape[1]
        kk = np.minimum(k, K - 1)
        out = np.empty(radii.shape)
        for c in range(len(lo)):
            block = lam.values[lo[c]:hi[c]].max(axis=0)
            out[c] = block[kk[c]] * lam.doubling_constant ** (k[c] - kk[c])
        return out
    pts = mu.coords().reshape(-1)
    out = np.empty(radii.shape)
    for c in range(len(lo)):
        z = pts[lo[c]:hi[c]]
        out[c] = lam(z[:, None, None], radii[c][None, :]).max(axis=0)
    return out


def a_sep_matrix(grid_1: ShiftedDyadicGrid, grid_2: ShiftedDyadicGrid, mu: AtomicMeasure,
                 lam: DominatingFunction, alpha: float) -> np.ndarray:
    """A_sep over all I1 in grid_1, I2 in grid_2 with l(I1) <= l(I2) (0 elsewhere)."""
    if mu.dim != 1:
        raise OperatorError("Schur matrices are implemented for one-dimensional factors")
    h = mu.spacing
    lo1, s1 = grid_1.cube_corners[:, 0], grid_1.cube_sides
    lo2, s2 = grid_2.cube_corners[:, 0], grid_2.cube_sides
    hi1, hi2 = lo1 + s1, lo2 + s2
    d = np.maximum(0, np.maximum(lo2[None, :] - hi1[:, None], lo1[:, None] - hi2[None, :]))
    l1, l2 = s1 * h, s2 * h
    D = l1[:, None] + l2[None, :] + d * h
    lam_sup = _cube_sup_lambda(lam, mu, grid_1, D)
    m1 = _interval_mass(mu, lo1, hi1)
    m2 = _interval_mass(mu, lo2, hi2)
    A = (np.sqrt(np.multiply.outer(l1, l2)) ** alpha / (D ** alpha * lam_sup)
         * np.sqrt(np.multiply.outer(m1, m2)))
    return np.where(s1[:, None] <= s2[None, :], A, 0.0)


def a_in_matrix(grid_1: ShiftedDyadicGrid, grid_2: ShiftedDyadicGrid, mu: AtomicMeasure,
                beta: float, r: int = 1) -> np.ndarray:
    """A_in over J1 in grid_1 inside a child of J2 in grid_2, l(J1) < 2**-r l(J2)."""
    if mu.dim != 1:
        raise OperatorError("Schur matrices are implemented for one-dimensional factors")
    lo1, s1 = grid_1.cube_corners[:, 0], grid_1.cube_sides
    lo2, s2 = grid_2.cube_corners[:, 0], grid_2.cube_sides
    hi1, hi2 = lo1 + s1, lo2 + s2
    mid = lo2 + s2 // 2
    left = (lo1[:, None] >= lo2[None, :]) & (hi1[:, None] <= mid[None, :])
    right = (lo1[:, None] >= mid[None, :]) & (hi1[:, None] <= hi2[None, :])
    ok = (left | right) & (s1[:, None] * 2 ** r < s2[None, :])
    m1 = _interval_mass(mu, lo1, hi1)
    m_left = _interval_mass(mu, lo2, mid)
    m_right = _interval_mass(mu, mid, hi2)
    m21 = np.where(left, m_left[None, :], m_right[None, :])
    ratio = np.divide(m1[:, None], m21, out=np.zeros(ok.shape), where=m21 > 0)
    A = (np.divide.outer(s1.astype(float), s2.astype(float))) ** (beta / 2) * np.sqrt(ratio)
    return np.where(ok, A, 0.0)


@dataclass
class SchurReport:
    kind: str
    checked: int
    worst_bilinear: float
    worst_square: float
    constant: float
    spectral_norm: float
    passed: bool

    def to_dict(self):
        return self.__dict__.copy()


def schur_checks(A: np.ndarray, xs, ys, constant: float, kind: str = "") -> SchurReport:
    """sum A x y <= C |x| |y| and |A^T x| <= C |x| for nonnegative weight pairs."""
    worst_b = worst_s = 0.0
    n = 0
    for x, y in zip(xs, ys):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        if np.any(x < 0) or np.any(y < 0):
            raise OperatorError("negative weights rejected")
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        n += 1
        if nx == 0:
            continue
        sq = np.linalg.norm(A.T @ x) / nx
        worst_s = max(worst_s, sq)
        if ny > 0:
            worst_b = max(worst_b, float(x @ A @ y) / (nx * ny))
    spec = schur_constant(A)
    ok = worst_b <= constant and worst_s <= constant
    return SchurReport(kind, n, worst_b, worst_s, constant, spec, ok)


def schur_constant(A: np.ndarray) -> float:
    """Best constant for nonnegative A: its largest singular value, by power iteration."""
    A = np.asarray(A, dtype=float)
    if not A.any():
        return 0.0
    return operator_norm(lambda v: A.T @ v, lambda u: A @ u, np.ones(A.shape[0]), tol=1e-10)


# -- testing conditions -------------------------------------------------------------------


def random_cancellative(mu: AtomicMeasure, cube: DyadicCube, rng, normalize=True):
    """Random function on the atoms of ``cube`` with mean zero and unit L2(mu) norm."""
    w = mu.flat.astype(float)
    atoms = cube.atoms(mu.side)
    f = np.zeros(mu.n_atoms)
    wa = w[atoms]
    if wa.sum() <= 0 or np.count_nonzero(wa) < 2:
        return None
    v = rng.standard_normal(len(atoms))
    v -= (v * wa).sum() / wa.sum()
    v[wa == 0] = 0.0
    nv = np.sqrt((v ** 2 * wa).sum())
    if nv == 0:
        return None
    f[atoms] = v / nv if normalize else v
    return f


def _indicator(n, atoms):
    out = np.zeros(n)
    out[atoms] = 1.0
    return out


def testing_conditions(T: ModelOperator, mu_1: AtomicMeasure, mu_2: AtomicMeasure, cubes,
                       seed=0) -> dict:
    """Worst constants of weak boundedness, both diagonal BMO conditions and diagonal testing.

    ``cubes`` is a list of (I, J) pairs; 5I and 5J are clipped to the box.
    """
    rng = np.random.default_rng(seed)
    w1, w2 = mu_1.flat.astype(float), mu_2.flat.astype(float)
    W = np.multiply.outer(w1, w2)
    Ts = T.adjoint()
    worst = {"wbp": 0.0, "bmo_1": 0.0, "bmo_2": 0.0, "diagonal": 0.0, "skipped": 0}
    for I, J in cubes:
        aI, aJ = I.atoms(mu_1.side), J.atoms(mu_2.side)
        cI, cJ = _indicator(len(w1), aI), _indicator(len(w2), aJ)
        m5I = w1[enlarged_atoms(I, 5, mu_1.side)].sum()
        m5J = w2[enlarged_atoms(J, 5, mu_2.side)].sum()
        if m5I <= 0 or m5J <= 0:
            worst["skipped"] += 1
            continue
        chi = np.multiply.outer(cI, cJ)
        TX, TsX = T.apply(chi), Ts.apply(chi)
        worst["wbp"] = max(worst["wbp"], abs((TX * chi * W).sum()) / (m5I * m5J))
        d = np.sqrt(((chi * TX) ** 2 * W).sum()) + np.sqrt(((chi * TsX) ** 2 * W).sum())
        worst["diagonal"] = max(worst["diagonal"], d / np.sqrt(m5I * m5J))
        a1 = random_cancellative(mu_1, I, rng)
        if a1 is not None:
            G = np.multiply.outer(a1, cJ)
            v = abs((TX * G * W).sum()) + abs((TsX * G * W).sum())
            worst["bmo_1"] = max(worst["bmo_1"], v / (np.sqrt(m5I) * m5J))
        a2 = random_cancellative(mu_2, J, rng)
        if a2 is not None:
            G = np.multiply.outer(cI, a2)
            v = abs((TX * G * W).sum()) + abs((TsX * G * W).sum())
            worst["bmo_2"] = max(worst["bmo_2"], v / (m5I * np.sqrt(m5J)))
    return worst


# -- lemma ratio checks for the tensor model -------------------------------------------------


def s_function(h_vals, I2: DyadicCube, I21: DyadicCube, mu: AtomicMeasure) -> np.ndarray:
    """chi_{I21^c} (h - <h>_{I21}) for a Haar function h of I2 with I21 a child."""
    w = mu.flat.astype(float)
    a21 = I21.atoms(mu.side)
    m21 = w[a21].sum()
    avg = (h_vals[a21] * w[a21]).sum() / m21 if m21 > 0 else 0.0
    out = h_vals - avg
    out[a21] = 0.0
    return out


@dataclass
class LemmaRatios:
    kind: str
    ratios: list = field(default_factory=list)
    skipped: int = 0

    @property
    def worst(self) -> float:
        return max(self.ratios) if self.ratios else 0.0

    def to_dict(self):
        return {"kind": self.kind, "n": len(self.ratios), "worst": self.worst, "skipped": self.skipped}


def _random_cube(grid, rng, gmin, gmax):
    g = int(rng.integers(gmin, gmax + 1))
    return grid.cubes(g)[int(rng.integers(grid.n_cubes(g)))]


def _sep_pair(grid_a, grid_b, mu, rng, gam, tries=200):
    """A separated pair with l(I1) <= l(I2), both with atoms of positive mass."""
    w = mu.flat
    for _ in range(tries):
        I2 = _random_cube(grid_b, rng, 1, grid_b.depth - 2)
        I1 = _random_cube(grid_a, rng, I2.gen, grid_a.depth - 1)
        if classify_pair(I1, I2, 1, gam, SEP_CONST) != PairClass.SEPARATED:
            continue
        if w[I1.atoms(mu.side)].sum() > 0 and w[I2.atoms(mu.side)].sum() > 0:
            return I1, I2
    return None


def _nested_pair(sys: FactorSystem, other_basis, rng, tries=400):
    """(J1, J2, J21) with J1 good from sys.grid, J2 from other grid, J1 in child J21."""
    b = sys.basis
    cand = np.nonzero(sys.good & (b.eta != 0) & b.nonzero & (b.gen >= sys.r + 1))[0]
    if len(cand) == 0:
        return None
    other = sys.other
    for _ in range(tries):
        i = int(cand[rng.integers(len(cand))])
        J1 = b.cube(i)
        gap = int(rng.integers(sys.r + 1, J1.gen + 1))
        J2 = other.cube_of(J1.lo, J1.gen - gap)
        J21 = containing_child(J1, J2)
        if J21 is None:
            continue
        try:
            k = other_basis.index_of(J2, 1)
        except Exception:
            continue
        if not other_basis.nonzero[k]:
            continue
        return i, J1, J2, J21, k
    return None


def separated_lemma_check(T: TensorKernel, sys_1: FactorSystem, sys_2: FactorSystem,
                          basis_1b, basis_2b, alpha: float, beta: float, n: int = 300,
                          seed=0, kinds=("sep_sep", "sep_in", "in_in")) -> dict:
    """Pairing ratios against A_sep A_sep, A_sep A_in and A_in A_in.

    sys_k = FactorSystem(mu_k, D_k, D'_k); basis_kb is the Haar basis of D'_k.
    """
    rng = np.random.default_rng(seed)
    mu1, mu2 = sys_1.mu, sys_2.mu
    gam1, gam2 = sys_1.gam, sys_2.gam
    out = {}
    if "sep_sep" in kinds:
        rep = LemmaRatios("sep_sep")
        while len(rep.ratios) < n and rep.skipped < 50 * n:
            p, q = _sep_pair(sys_1.grid, sys_1.other, mu1, rng, gam1), \
                _sep_pair(sys_2.grid, sys_2.other, mu2, rng, gam2)
            if p is None or q is None:
                rep.skipped += 1
                continue
            (I1, I2), (J1, J2) = p, q
            f1, f2 = random_cancellative(mu1, I1, rng), random_cancellative(mu2, J1, rng)
            g1, g2 = _random_normalized(mu1, I2, rng), _random_normalized(mu2, J2, rng)
            if f1 is None or f2 is None or g1 is None or g2 is None:
                rep.skipped += 1
                continue
            val = abs(T.pairing_tensor(f1, f2, g1, g2))
            A = a_sep(I1, I2, alpha, T.lam_1, mu1) * a_sep(J1, J2, beta, T.lam_2, mu2)
            rep.ratios.append(val / A)
        out["sep_sep"] = rep
    if "sep_in" in kinds:
        rep = LemmaRatios("sep_in")
        while len(rep.ratios) < n and rep.skipped < 50 * n:
            p = _sep_pair(sys_1.grid, sys_1.other, mu1, rng, gam1)
            q = _nested_pair(sys_2, basis_2b, rng)
            if p is None or q is None:
                rep.skipped += 1
                continue
            I1, I2 = p
            j, J1, J2, J21, k = q
            f1 = random_cancellative(mu1, I1, rng)
            g1 = _random_normalized(mu1, I2, rng)
            if f1 is None or g1 is None:
                rep.skipped += 1
                continue
            u1 = sys_2.basis.H[j]
            u2 = basis_2b.H[k]
            w2 = mu2.flat.astype(float)
            a21 = J21.atoms(mu2.side)
            m21 = w2[a21].sum()
            avg = (u2[a21] * w2[a21]).sum() / m21 if m21 > 0 else 0.0
            out21 = np.ones(mu2.n_atoms)
            out21[a21] = 0.0
            # the averaged term outside the child and each off-child piece
            vals = [abs(avg * T.pairing_tensor(f1, u1, g1, out21))]
            for ch in J2.children():
                if ch == J21:
                    continue
                piece = np.zeros(mu2.n_atoms)
                ca = ch.atoms(mu2.side)
                piece[ca] = u2[ca]
                vals.append(abs(T.pairing_tensor(f1, u1, g1, piece)))
            A = a_sep(I1, I2, alpha, T.lam_1, mu1) * a_in(J1, J2, beta, mu2, sys_2.r)
            if A <= 0:
                rep.skipped += 1
                continue
            rep.ratios.append(max(vals) / A)
        out["sep_in"] = rep
    if "in_in" in kinds:
        rep = LemmaRatios("in_in")
        while len(rep.ratios) < n and rep.skipped < 50 * n:
            p = _nested_pair(sys_1, basis_1b, rng)
            q = _nested_pair(sys_2, basis_2b, rng)
            if p is None or q is None:
                rep.skipped += 1
                continue
            i, I1, I2, I21, ki = p
            j, J1, J2, J21, kj = q
            s1 = s_function(basis_1b.H[ki], I2, I21, mu1)
            s2 = s_function(basis_2b.H[kj], J2, J21, mu2)
            val = abs(T.pairing_tensor(sys_1.basis.H[i], sys_2.basis.H[j], s1, s2))
            A = a_in(I1, I2, alpha, mu1, sys_1.r) * a_in(J1, J2, beta, mu2, sys_2.r)
            if A <= 0:
                rep.skipped += 1
                continue
            rep.ratios.append(val / A)
        out["in_in"] = rep
    return out


def _random_normalized(mu, cube, rng):
    w = mu.flat.astype(float)
    atoms = cube.atoms(mu.side)
    v = np.zeros(mu.n_atoms)
    v[atoms] = rng.standard_normal(len(atoms))
    n = np.sqrt((v ** 2 * w).sum())
    return None if n == 0 else v / n


# -- T1 and the necessity experiment ----------------------------------------------------------


def apply_T1(T: ModelOperator) -> np.ndarray:
    """T applied to the indicator of the whole domain (the finite stand-in for 1)."""
    return T.apply(np.ones(T.shape))


def maximal_first_cubes(tilde_inside: np.ndarray, grid_1: ShiftedDyadicGrid) -> list[list[int]]:
    """For every L (column), the maximal F of grid_1 with F x L inside the enlargement."""
    par = grid_1.parent_gid
    out = []
    for L in range(tilde_inside.shape[1]):
        col = tilde_inside[:, L]
        top = par < 0
        up = np.zeros_like(col)
        up[~top] = col[par[~top]]
        out.append([int(F) for F in np.nonzero(col & ~up)[0]])
    return out


def necessity_structure(b, omega: OmegaSet, psys: ProductSystem, T: ModelOperator | None = None,
                        T_norm: float | None = None) -> dict:
    """Structural facts used by the necessity argument, for one Omega.

    b is split along the enlargement; for every L of D'_m the part supported
    over F_L must live in F_L x L^c.
    """
    fam = psys.family
    g1 = fam.grid_1
    w = psys.weights()
    tilde = fam.tilde(omega.mask)
    m_om = float((w * omega.mask).sum())
    m_tilde = float((w * tilde).sum())
    b = np.asarray(b, dtype=float)
    b_in, b_out = b * tilde, b * ~tilde
    facts = {"split_exact": bool(np.array_equal(b_in + b_out, b)),
             "tilde_growth": m_tilde / m_om if m_om > 0 else 0.0,
             "tilde_growth_ok": m_tilde <= 64 * m_om * (1 + 1e-12)}
    tin = fam.contained(tilde)
    FL = maximal_first_cubes(tin, g1)
    spt_ok = True
    sum_ok = True
    for L, Fs in enumerate(FL):
        xF = np.zeros(g1.n_atoms, dtype=bool)
        for F in Fs:
            xF |= fam.Z1[F] > 0
        b1 = b_out * xF[:, None]
        b2 = b_out - b1
        inL = fam.Z2[L] > 0
        if np.any(b1[:, inL] != 0):
            spt_ok = False
        if not np.array_equal(b1 + b2, b_out):
            sum_ok = False
    facts["b1_support_ok"] = spt_ok
    facts["b1_b2_sum_ok"] = sum_ok
    # hat-K containment: good cubes r below K stay away from the boundary of K
    facts["hat_ok"] = _hat_containment(psys.sys_1) and _hat_containment(psys.sys_2)
    if T is not None:
        Tb_in = T.apply(b_in)
        C = psys.coefficients(Tb_in)
        E = psys.energy(C)
        inside = float(E[fam.contained(omega.mask)].sum())
        nrm = T.norm_bound() if T_norm is None else T_norm
        bound = nrm ** 2 * float((b_in ** 2 * w).sum())
        facts["near_part"] = inside
        facts["near_bound"] = bound
        facts["near_ok"] = inside <= bound * (1 + 1e-9) + 1e-300
    return facts


def _hat_containment(sys: FactorSystem) -> bool:
    b = sys.basis
    rows = np.nonzero(sys.in_window)[0]
    other = sys.other
    for i in rows:
        K = int(sys.parent[i])
        lo = other.cube_corners[K]
        side = other.cube_sides[K]
        I_lo = b.corner[i]
        I_hi = I_lo + sys.grid.side(int(b.gen[i]))
        gap = min((I_lo - lo).min(), (lo + side - I_hi).min())
        need = sys.bad_const * 2.0 ** (-sys.r * sys.gam) * side
        if gap <= need * (1 - 1e-12) and not gap > need:
            return False
    return True


@dataclass
class NecessityReport:
    values: list
    worst: float
    constant: float | None
    passed: bool | None
    structure_ok: bool
    facts: list

    def to_dict(self):
        return {"n": len(self.values), "worst": self.worst, "constant": self.constant,
                "pass": self.passed, "structure_ok": self.structure_ok}


def tb_necessity_experiment(T: ModelOperator, bs, psys: ProductSystem,
                            family=("single_rects", "greedy"), constant=None,
                            check_structure: bool = True, T_norm=None) -> NecessityReport:
    """bmo_prod_estimate(T b) / |b|_inf over a list of bounded b."""
    vals, facts = [], []
    ok = True
    if T_norm is None and check_structure:
        T_norm = T.norm_bound()
    for b in bs:
        b = np.asarray(b, dtype=float)
        sup = float(np.abs(b[psys.weights() > 0]).max()) if np.any(psys.weights() > 0) else 0.0
        if sup == 0:
            vals.append(0.0)
            continue
        est = bmo_prod_estimate(T.apply(b), psys, list(family))
        vals.append(est.value / sup)
        if check_structure and est.witness is not None and est.witness.mask.any():
            f = necessity_structure(b, est.witness, psys, T, T_norm)
            facts.append(f)
            ok &= all(f[k] for k in ("split_exact", "tilde_growth_ok", "b1_support_ok",
                                      "b1_b2_sum_ok", "hat_ok", "near_ok"))
    worst = max(vals) if vals else 0.0
    passed = None if constant is None else worst <= constant
    return NecessityReport(vals, worst, constant, passed, bool(ok), facts)
