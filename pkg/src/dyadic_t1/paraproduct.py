"""One-parameter, full and mixed paraproducts, and a power-iteration norm."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .haar import FactorSystem
from .spaces import ProductSystem, h1_bmo_duality_check, one_param_maximal


class ParaproductError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


def _index_mask(basis, index):
    if index is None:
        return basis.eta != 0
    if index == 0:
        raise ParaproductError("noncancellative index rejected")
    if not 0 < index < 2 ** basis.grid.dim:
        raise ParaproductError(f"index {index} out of range")
    return basis.eta == index


# -- one parameter ------------------------------------------------------------


class OneParamParaproduct:
    """w -> sum over good J1 at gap r below S(J1) of <w>_{S(J1)} <a, u_{J1}> u_{J1}."""

    def __init__(self, a, sys: FactorSystem, kappa=None):
        self.sys = sys
        b = sys.basis
        self.mask = sys.in_window & _index_mask(b, kappa)
        self.a_coef = b.coefficients(a) * self.mask
        self.w = sys.mu.flat.astype(float)

    def apply(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        avg = self.sys.P @ (w * self.w)
        return self.sys.basis.H.T @ (avg * self.a_coef)

    def adjoint(self, v) -> np.ndarray:
        c = self.sys.basis.HW @ np.asarray(v, dtype=float)
        return self.sys.P.T @ (c * self.a_coef)

    def norm(self, **kw) -> float:
        return operator_norm(self.apply, self.adjoint, self.w, **kw)


def apply_one_param(a, kappa, w, sys: FactorSystem) -> np.ndarray:
    if kappa is not None and kappa == 0:
        raise ParaproductError("kappa must be nonzero")
    return OneParamParaproduct(a, sys, kappa).apply(w)


# -- full bi-parameter ---------------------------------------------------------


class FullParaproduct:
    """u -> sum over good R of <u>_{S(R)} <b, h_R> h_R (rectangles S in the other grids)."""

    def __init__(self, b, psys: ProductSystem, eta=None, kappa=None):
        self.psys = psys
        self.mask = psys.window & np.multiply.outer(_index_mask(psys.sys_1.basis, eta),
                                                    _index_mask(psys.sys_2.basis, kappa))
        self.b_coef = psys.coefficients(b) * self.mask

    def averages(self, u) -> np.ndarray:
        """<u>_{S(R)} for every pair of basis functions (0 off the window)."""
        s1, s2 = self.psys.sys_1, self.psys.sys_2
        w = self.psys.weights()
        return (s1.P @ (np.asarray(u, dtype=float) * w) @ s2.P.T) * self.mask

    def coefficients(self, u) -> np.ndarray:
        return self.averages(u) * self.b_coef

    def apply(self, u) -> np.ndarray:
        return self.psys.synthesize(self.coefficients(u))

    def adjoint(self, v) -> np.ndarray:
        s1, s2 = self.psys.sys_1, self.psys.sys_2
        c = self.psys.coefficients(v) * self.b_coef
        return s1.P.T @ c @ s2.P

    def energy(self) -> np.ndarray:
        return self.psys.energy(self.b_coef)


def apply_full(b, eta, kappa, u, psys: ProductSystem) -> np.ndarray:
    if eta == 0 or kappa == 0:
        raise ParaproductError("eta and kappa must be nonzero")
    return FullParaproduct(b, psys, eta, kappa).apply(u)


@dataclass
class FullBoundReport:
    norm_out: float
    orth_sum: float
    L_tilde: float
    norm_u: float
    bound: float
    ratio: float
    orth_residual: float
    threshold: float

    def to_dict(self):
        return self.__dict__.copy()


def full_bound_check(b, u, psys: ProductSystem, eta=None, kappa=None) -> FullBoundReport:
    """||Pi_b u|| against 4 L(u) ||u||, L(u) from the level sets of the maximal function of u."""
    op = FullParaproduct(b, psys, eta, kappa)
    w = psys.weights()
    u = np.asarray(u, dtype=float)
    out = op.apply(u)
    n_out = float(np.sqrt((out ** 2 * w).sum()))
    orth = float(np.sqrt((op.coefficients(u) ** 2).sum()))
    V = psys.family.maximal(u)
    L, thr = psys.level_set_ratio(op.energy(), V)
    n_u = float(np.sqrt((u ** 2 * w).sum()))
    bound = 4 * L * n_u
    ratio = n_out / bound if bound > 0 else (0.0 if n_out == 0 else np.inf)
    resid = abs(n_out ** 2 - orth ** 2)
    return FullBoundReport(n_out, orth, L, n_u, bound, ratio, resid, thr)


# -- mixed ---------------------------------------------------------------------


class MixedParaproduct:
    """The mixed paraproduct.

    ``sys_1`` is (mu_n, D_n, D'_n); ``sys_2`` is (mu_m, D'_m, D_m), so that the
    second factor's Haar functions live in D'_m and their ancestors in D_m.
    Output is expanded in chi_{S(I1)}/mu(S(I1)) tensor u_{J2}.
    """

    def __init__(self, b, psys: ProductSystem, eta=None, kappa=None):
        self.psys = psys
        s1, s2 = psys.sys_1, psys.sys_2
        self.mask = psys.window & np.multiply.outer(_index_mask(s1.basis, eta),
                                                    _index_mask(s2.basis, kappa))
        self.b_coef = psys.coefficients(b) * self.mask
        self.w1 = s1.mu.flat.astype(float)
        self.w2 = s2.mu.flat.astype(float)

    def u_pairings(self, u) -> np.ndarray:
        """<u, h_{I1} tensor chi_{S(J2)} / mu(S(J2))>."""
        s1, s2 = self.psys.sys_1, self.psys.sys_2
        return (s1.basis.HW @ np.asarray(u, dtype=float) @ (s2.P * self.w2).T) * self.mask

    def v_pairings(self, v) -> np.ndarray:
        """<v, chi_{S(I1)} / mu(S(I1)) tensor u_{J2}>."""
        s1, s2 = self.psys.sys_1, self.psys.sys_2
        return ((s1.P * self.w1) @ np.asarray(v, dtype=float) @ s2.basis.HW.T) * self.mask

    def apply(self, u) -> np.ndarray:
        s1, s2 = self.psys.sys_1, self.psys.sys_2
        return s1.P.T @ (self.u_pairings(u) * self.b_coef) @ s2.basis.H

    def adjoint(self, v) -> np.ndarray:
        s1, s2 = self.psys.sys_1, self.psys.sys_2
        c = self.v_pairings(v) * self.b_coef
        return s1.basis.H.T @ c @ s2.P

    def dual_coefficients(self, u, v) -> np.ndarray:
        """Window coefficients of the H1 function f with <Pi u, v> = <b, f>."""
        return self.u_pairings(u) * self.v_pairings(v)


def apply_mixed(b, eta, kappa, u, psys: ProductSystem) -> np.ndarray:
    if eta == 0 or kappa == 0:
        raise ParaproductError("eta and kappa must be nonzero")
    return MixedParaproduct(b, psys, eta, kappa).apply(u)


def mixed_duality_check(b, u, v, psys: ProductSystem, eta=None, kappa=None) -> dict:
    """The duality route for the mixed paraproduct, step by step.

    <Pi u, v> = <b, f>; |<b,f>| against L ||Sf||_1; the pointwise bound
    Sf <= A**1/2 B**1/2 with one-parameter maximal functions; and
    ||Sf||_1 <= ||A||_1**1/2 ||B||_1**1/2 <= 4 ||u|| ||v||.
    """
    op = MixedParaproduct(b, psys, eta, kappa)
    s1, s2 = psys.sys_1, psys.sys_2
    w = psys.weights()
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    direct = float((op.apply(u) * v * w).sum())
    lam = op.dual_coefficients(u, v)
    via_b = float((op.b_coef * lam).sum())
    dual = h1_bmo_duality_check(b, lam, psys)
    Sf = psys.square_function(C=lam)
    rows1 = op.mask.any(axis=1)
    rows2 = op.mask.any(axis=0)
    # <u, h_{I1}>_1 as functions of x2, maximal along D_m = s2.other
    g1 = (s1.basis.HW @ u)[rows1]
    Mg1 = _grid_maximal(g1, s2.other, s2.mu)
    A = s1.P[rows1].T @ (Mg1 ** 2)
    # <v, u_{J2}>_2 as functions of x1, maximal along D'_n = s1.other
    g2 = (v @ s2.basis.HW.T)[:, rows2]
    Mg2 = _grid_maximal(g2.T, s1.other, s1.mu).T
    B = (Mg2 ** 2) @ s2.P[rows2]
    pointwise = np.sqrt(np.maximum(A, 0) * np.maximum(B, 0))
    pos = w > 0
    slack = float((Sf - pointwise)[pos].max()) if pos.any() else 0.0
    nA, nB = float((A * w).sum()), float((B * w).sum())
    n_u = float(np.sqrt((u ** 2 * w).sum()))
    n_v = float(np.sqrt((v ** 2 * w).sum()))
    return {"pairing_direct": direct, "pairing_via_b": via_b, "s_norm_1": dual.s_norm_1,
            "L_tilde": dual.L_tilde, "dual_ratio": dual.ratio, "chain": dual.chain,
            "pointwise_slack": slack, "A_norm_1": nA, "B_norm_1": nB,
            "cs_bound": float(np.sqrt(nA * nB)), "norm_u": n_u, "norm_v": n_v,
            "maximal_bound": 4 * n_u * n_v}


def _grid_maximal(G, grid, mu):
    """Row-wise one-parameter dyadic maximal function on ``grid``."""
    if G.shape[0] == 0:
        return G
    return one_param_maximal(G, grid, mu, axis=-1)


# -- norms ---------------------------------------------------------------------


def operator_norm(apply, adjoint, weights, n=None, tol: float = 1e-8, max_iter: int = 5000,
                  seed: int = 0) -> float:
    """Largest singular value in L2(weights) by power iteration on T*T."""
    weights = np.asarray(weights, dtype=float)
    n = weights.shape if n is None else n
    shape = n if isinstance(n, tuple) else (n,)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)

    def norm(y):
        return float(np.sqrt((y ** 2 * weights).sum()))

    nx = norm(x)
    if nx == 0:
        return 0.0
    x = x / nx
    sigma2 = 0.0
    resid = np.inf
    for _ in range(max_iter):
        y = adjoint(apply(x))
        sigma2 = float((y * x * weights).sum())
        ny = norm(y)
        if ny == 0:
            return 0.0
        resid = norm(y - sigma2 * x)
        if resid <= tol * max(ny, 1e-300):
            return float(np.sqrt(max(sigma2, 0.0)))
        x = y / ny
    raise ConvergenceError("power iteration did not converge", resid)


def matrix_norm(M, tol: float = 1e-8, max_iter: int = 5000, seed: int = 0) -> float:
    M = np.asarray(M, dtype=float)
    return operator_norm(lambda x: M @ x, lambda y: M.T @ y, np.ones(M.shape[1]),
                         tol=tol, max_iter=max_iter, seed=seed)
