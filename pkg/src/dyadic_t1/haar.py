"""Haar bases adapted to an atomic measure, martingale differences, good parts.

For a cube I with children ordered I_1, ..., I_{2^n} by increasing mass and
tails T_k = I_k u ... u I_{2^n}:

    h_{I,0}   = mu(I)**-1/2 chi_I
    h_{I,eta} = (mu(I_eta) mu(T_{eta+1}) / mu(T_eta))**1/2
                * (chi_{I_eta} / mu(I_eta) - chi_{T_{eta+1}} / mu(T_{eta+1}))

and h_{I,eta} = 0 when mu(I_eta) = 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .grid import BAD_CONST, DyadicCube, GridError, ShiftedDyadicGrid, bad_mask
from .measure import AtomicMeasure
from ._validation import check_function, check_compatible


class HaarError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HaarFunction:
    cube: DyadicCube
    eta: int
    order: tuple          # child positions (lexicographic) listed as I_1, I_2, ...
    values: np.ndarray    # value on each child, indexed by lexicographic position

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)

    def evaluate(self, box: int) -> np.ndarray:
        """Values at every atom of [0, box)**dim, flattened."""
        dim = self.cube.dim
        out = np.zeros(box ** dim)
        atoms = self.cube.atoms(box)
        if len(atoms) == 0:
            return out
        pts = np.stack(np.unravel_index(atoms, (box,) * dim), axis=-1)
        out[atoms] = self.values[child_position(pts, self.cube)]
        return out


def child_position(pts: np.ndarray, cube: DyadicCube) -> np.ndarray:
    """Lexicographic child index of points inside ``cube``."""
    bits = (pts - cube.lo) // (cube.side // 2)
    dim = cube.dim
    return (bits * (2 ** np.arange(dim - 1, -1, -1))).sum(axis=-1)


def order_children(masses: np.ndarray) -> np.ndarray:
    """Increasing mass, ties by lexicographic position."""
    return np.lexsort((np.arange(len(masses)), masses))


def haar_values(masses: np.ndarray):
    """Child values of the cancellative functions of one cube.

    ``masses`` is indexed by lexicographic child position.  Returns the
    ordering and an array (2**n - 1, 2**n) of values.
    """
    m = np.asarray(masses, dtype=float)
    k = len(m)
    order = order_children(m)
    ms = m[order]
    tails = np.cumsum(ms[::-1])[::-1]
    vals = np.zeros((k - 1, k))
    for eta in range(1, k):
        m_eta = ms[eta - 1]
        if m_eta <= 0:
            continue
        t_eta, t_next = tails[eta - 1], tails[eta]
        c = np.sqrt(m_eta * t_next / t_eta)
        vals[eta - 1, order[eta - 1]] = c / m_eta
        vals[eta - 1, order[eta:]] = -c / t_next
    return order, vals, tails


def check_tail_bound(masses: np.ndarray, dim: int, rtol: float = 1e-12) -> bool:
    """mu(T_k) >= (1 - (k - 1) 2**-n) mu(I) for the chosen ordering."""
    order, _, tails = haar_values(masses)
    total = tails[0] if len(tails) else 0.0
    k = np.arange(1, len(tails) + 1)
    need = (1 - (k - 1) * 2.0 ** -dim) * total
    return bool(np.all(tails >= need - rtol * max(total, 1e-300)))


def build_haar(I: DyadicCube, mu: AtomicMeasure) -> list[HaarFunction]:
    """h_{I,0}, ..., h_{I,2^n - 1} for one cube."""
    box = mu.side
    w = mu.flat
    nch = 2 ** I.dim
    masses = np.zeros(nch)
    atoms = I.atoms(box)
    if len(atoms):
        pts = np.stack(np.unravel_index(atoms, (box,) * I.dim), axis=-1)
        np.add.at(masses, child_position(pts, I), w[atoms])
    total = masses.sum()
    order, vals, _ = haar_values(masses)
    h0 = np.full(nch, total ** -0.5 if total > 0 else 0.0)
    out = [HaarFunction(I, 0, tuple(int(v) for v in order), h0)]
    for eta in range(1, nch):
        out.append(HaarFunction(I, eta, tuple(int(v) for v in order), vals[eta - 1]))
    return out


def martingale_ops(f, I: DyadicCube, mu: AtomicMeasure):
    """(E_I f, Delta_I f) as functions on the atoms; null cubes average to 0."""
    f = check_function(f, mu.n_atoms)
    box = mu.side
    w = mu.flat
    E = np.zeros(mu.n_atoms)
    D = np.zeros(mu.n_atoms)
    atoms = I.atoms(box)
    mI = w[atoms].sum()
    if mI <= 0:
        return E, D
    avg = (f[atoms] * w[atoms]).sum() / mI
    E[atoms] = avg
    for ch in I.children():
        ca = ch.atoms(box)
        mc = w[ca].sum()
        if mc > 0:
            D[ca] = (f[ca] * w[ca]).sum() / mc - avg
    return E, D


# -- bases on a whole grid ----------------------------------------------------


class HaarBasis:
    """All Haar functions of (mu, grid) in a scale window.

    Noncancellative functions h_{I,0} live at ``top_gen``; cancellative ones
    at generations top_gen <= g < bottom_gen.  Rows of ``H`` are function
    values on atoms; ``HW = H * weights`` so coefficients are ``HW @ f``.
    """

    def __init__(self, mu: AtomicMeasure, grid: ShiftedDyadicGrid, top_gen: int = 0,
                 bottom_gen: int | None = None):
        check_compatible(mu, grid)
        bottom_gen = grid.depth if bottom_gen is None else bottom_gen
        if not 0 <= top_gen <= bottom_gen <= grid.depth:
            raise HaarError("window outside grid scales")
        self.mu, self.grid = mu, grid
        self.top_gen, self.bottom_gen = top_gen, bottom_gen
        self._build()

    def _build(self):
        mu, grid = self.mu, self.grid
        dim = grid.dim
        nch = 2 ** dim
        w = mu.flat.astype(float)
        masses = grid.cube_masses(w)
        rows, gens, gids, etas = [], [], [], []
        top = self.top_gen
        n_top = grid.n_cubes(top)
        lab = grid.labels(top)
        m_top = masses[grid.gid_start(top): grid.gid_start(top) + n_top]
        scale = np.where(m_top > 0, 1.0 / np.sqrt(np.where(m_top > 0, m_top, 1.0)), 0.0)
        Htop = np.zeros((n_top, grid.n_atoms))
        Htop[lab, np.arange(grid.n_atoms)] = scale[lab]
        rows.append(Htop)
        gens.append(np.full(n_top, top))
        gids.append(grid.gid_start(top) + np.arange(n_top))
        etas.append(np.zeros(n_top, dtype=int))
        self.tail_bound_ok = True
        for g in range(top, self.bottom_gen):
            nc = grid.n_cubes(g)
            corners = grid.cube_corners[grid.gid_start(g): grid.gid_start(g) + nc]
            half = grid.side(g) // 2
            cm = np.zeros((nc, nch))
            child_lab = np.full((nc, nch), -1)
            for pos, bits in enumerate(np.ndindex(*(2,) * dim)):
                cc = corners + np.asarray(bits) * half
                idx = grid.index_of(cc, g + 1) - grid._tables[0][g + 1]
                cnt = grid._tables[1][g + 1]
                ok = np.all((idx >= 0) & (idx < cnt), axis=1)
                loc = np.full(nc, -1)
                if ok.any():
                    loc[ok] = np.ravel_multi_index(tuple(idx[ok].T), tuple(cnt))
                child_lab[:, pos] = loc
                cm[ok, pos] = masses[grid.gid_start(g + 1) + loc[ok]]
            vals = np.zeros((nc, nch - 1, nch))
            for c in range(nc):
                order, v, tails = haar_values(cm[c])
                vals[c] = v
                tot = tails[0]
                k = np.arange(1, nch + 1)
                if np.any(tails < (1 - (k - 1) * 2.0 ** -dim) * tot - 1e-12 * max(tot, 1e-300)):
                    self.tail_bound_ok = False
            # child position of every atom at generation g
            pos_of_child = np.full(grid.n_cubes(g + 1), -1)
            for pos in range(nch):
                ok = child_lab[:, pos] >= 0
                pos_of_child[child_lab[ok, pos]] = pos
            cube_of_atom = grid.labels(g)
            pos_atom = pos_of_child[grid.labels(g + 1)]
            Hg = np.zeros((nc, nch - 1, grid.n_atoms))
            cols = np.arange(grid.n_atoms)
            for eta in range(nch - 1):
                Hg[cube_of_atom, eta, cols] = vals[cube_of_atom, eta, pos_atom]
            rows.append(Hg.reshape(nc * (nch - 1), grid.n_atoms))
            gens.append(np.full(nc * (nch - 1), g))
            gids.append(np.repeat(grid.gid_start(g) + np.arange(nc), nch - 1))
            etas.append(np.tile(np.arange(1, nch), nc))
        if not self.tail_bound_ok:
            raise HaarError("child ordering violates the tail mass bound")
        self.H = np.concatenate(rows)
        self.gen = np.concatenate(gens).astype(np.int64)
        self.cube_gid = np.concatenate(gids).astype(np.int64)
        self.eta = np.concatenate(etas).astype(np.int64)
        self.corner = grid.cube_corners[self.cube_gid]
        self.weights = w
        self.HW = self.H * w[None, :]
        self.norms2 = (self.H ** 2 * w[None, :]).sum(axis=1)
        self.nonzero = self.norms2 > 0.5
        for arr in (self.H, self.HW):
            arr.setflags(write=False)

    @property
    def n_funcs(self) -> int:
        return self.H.shape[0]

    def keys(self) -> list[tuple]:
        return [(int(g), tuple(int(v) for v in c), int(e))
                for g, c, e in zip(self.gen, self.corner, self.eta)]

    def cube(self, i: int) -> DyadicCube:
        return DyadicCube(int(self.gen[i]), tuple(int(v) for v in self.corner[i]),
                          self.grid.side(int(self.gen[i])))

    def index_of(self, cube: DyadicCube, eta: int) -> int:
        gid = self.grid.gid(cube)
        hit = np.nonzero((self.cube_gid == gid) & (self.eta == eta))[0]
        if len(hit) == 0:
            raise HaarError("function not in this basis window")
        return int(hit[0])

    def coefficients(self, f) -> np.ndarray:
        """<f, h> for every basis function; f may be (n_atoms,) or (n_atoms, k)."""
        return self.HW @ np.asarray(f, dtype=float)

    def reconstruct(self, c) -> np.ndarray:
        return self.H.T @ np.asarray(c, dtype=float)

    def gram(self) -> np.ndarray:
        return self.HW @ self.H.T

    def expand(self, f) -> "CoefficientTable":
        f = check_function(f, self.grid.n_atoms)
        return CoefficientTable(self.keys(), self.coefficients(f), (self.top_gen, self.bottom_gen))


@dataclass
class CoefficientTable:
    """Coefficients keyed by (gen, corner, eta); 2-D tables carry keys2 too."""

    keys: list
    values: np.ndarray
    window: tuple
    keys2: list | None = None

    def as_dict(self) -> dict:
        if self.keys2 is None:
            return {k: float(v) for k, v in zip(self.keys, self.values)}
        return {(a, b): float(self.values[i, j]) for i, a in enumerate(self.keys)
                for j, b in enumerate(self.keys2)}

    def to_jsonl(self, tol: float = 0.0) -> str:
        lines = []
        if self.keys2 is None:
            for (g, c, e), v in zip(self.keys, self.values):
                if abs(v) > tol:
                    lines.append(json.dumps({"gen": g, "corner": list(c), "eta": e, "value": float(v)}))
        else:
            ii, jj = np.nonzero(np.abs(self.values) > tol)
            for i, j in zip(ii, jj):
                (g, c, e), (g2, c2, k2) = self.keys[i], self.keys2[j]
                lines.append(json.dumps({"gen": g, "corner": list(c), "eta": e, "gen2": g2,
                                         "corner2": list(c2), "kappa": k2,
                                         "value": float(self.values[i, j])}))
        return "\n".join(lines) + ("\n" if lines else "")


def expand(f, grid: ShiftedDyadicGrid, mu: AtomicMeasure, top_gen: int = 0,
           bottom_gen: int | None = None) -> CoefficientTable:
    return HaarBasis(mu, grid, top_gen, bottom_gen).expand(f)


def tensor_expand(F, basis_1: HaarBasis, basis_2: HaarBasis) -> CoefficientTable:
    F = np.asarray(F, dtype=float)
    C = basis_1.HW @ F @ basis_2.HW.T
    return CoefficientTable(basis_1.keys(), C, (basis_1.top_gen, basis_1.bottom_gen), basis_2.keys())


def partial_pairing(F, basis_1: HaarBasis) -> np.ndarray:
    """Row i is <F, h_i>_1 as a function of the second variable."""
    return basis_1.HW @ np.asarray(F, dtype=float)


def truncate_E_k(F, basis: HaarBasis, k: int, axis: int = 0) -> np.ndarray:
    """Projection onto the window (top functions, cancellative gens < k) along one axis."""
    keep = (basis.eta == 0) | (basis.gen < k)
    H, HW = basis.H[keep], basis.HW[keep]
    F = np.asarray(F, dtype=float)
    if axis == 0:
        return H.T @ (HW @ F)
    return (F @ HW.T) @ H


# -- goodness and r-fold ancestors ---------------------------------------------


class FactorSystem:
    """One factor: Haar basis on ``grid``, goodness and ancestors in ``other``.

    ``parent[i]`` is the global id (in ``other``) of the cube S(I) of side
    2**r side(I) containing the cube of function i, set when that cube is
    good, has generation >= r and the function is cancellative.  Those
    functions form the good window.
    """

    def __init__(self, mu: AtomicMeasure, grid: ShiftedDyadicGrid, other: ShiftedDyadicGrid,
                 r: int, gam: float, bad_const: float = BAD_CONST, basis: HaarBasis | None = None):
        check_compatible(mu, other)
        self.mu, self.grid, self.other = mu, grid, other
        self.r, self.gam, self.bad_const = r, gam, bad_const
        self.basis = basis if basis is not None else HaarBasis(mu, grid)
        b = self.basis
        self.good = ~bad_mask(b.gen, b.corner, other, r, gam, bad_const)
        self.parent = np.full(b.n_funcs, -1, dtype=np.int64)
        elig = self.good & (b.gen >= r) & (b.eta != 0)
        for i in np.nonzero(elig)[0]:
            self.parent[i] = self._ancestor_gid(b.corner[i], int(b.gen[i]), int(b.gen[i]) - r)
        self.in_window = elig & b.nonzero
        self.other_masses = other.cube_masses(mu.flat.astype(float))

    def _ancestor_gid(self, corner, gen, gen_s) -> int:
        other = self.other
        idx = other.index_of(corner, gen_s)
        lo = idx * other.side(gen_s) + other.offset(gen_s)
        if np.any(corner + self.grid.side(gen) > lo + other.side(gen_s)):
            raise GridError("good cube straddles a coarser boundary of the other grid")
        loc = idx - other._tables[0][gen_s]
        cnt = other._tables[1][gen_s]
        return int(np.ravel_multi_index(tuple(loc), tuple(cnt))) + other.gid_start(gen_s)

    def ancestor_at(self, i: int, gen_s: int) -> int:
        return self._ancestor_gid(self.basis.corner[i], int(self.basis.gen[i]), gen_s)

    @cached_property
    def P(self) -> np.ndarray:
        """Row i: chi_{S(I_i)} / mu(S(I_i)) for window functions, else 0."""
        n = self.grid.n_atoms
        out = np.zeros((self.basis.n_funcs, n))
        Z = self._other_indicator
        rows = np.nonzero(self.in_window)[0]
        par = self.parent[rows]
        m = self.other_masses[par]
        ok = m > 0
        out[rows[ok]] = Z[par[ok]] / m[ok, None]
        return out

    @cached_property
    def _other_indicator(self) -> np.ndarray:
        return self.other.indicator_matrix()

    @cached_property
    def Q(self) -> np.ndarray:
        """One-hot (n_other_cubes, n_funcs) map from window functions to S(I)."""
        out = np.zeros((self.other.n_cubes_total, self.basis.n_funcs))
        rows = np.nonzero(self.in_window)[0]
        out[self.parent[rows], rows] = 1.0
        return out


def good_projection(F, sys_1: FactorSystem, sys_2: FactorSystem):
    """(f_good, f_bad): keep product coefficients whose two cubes are good."""
    b1, b2 = sys_1.basis, sys_2.basis
    C = b1.HW @ np.asarray(F, dtype=float) @ b2.HW.T
    keep = np.multiply.outer(sys_1.good, sys_2.good)
    f_good = b1.H.T @ (C * keep) @ b2.H
    return f_good, np.asarray(F, dtype=float) - f_good


# -- estimator-style wrapper --------------------------------------------------


class HaarTransformer(TransformerMixin, BaseEstimator):
    """Haar analysis and synthesis of functions on the atoms of one measure.

    ``fit`` builds the basis; ``transform`` maps rows of X (functions on the
    atoms) to coefficient rows, ``inverse_transform`` maps back.
    """

    def __init__(self, measure=None, grid=None, top_gen=0, bottom_gen=None):
        self.measure = measure
        self.grid = grid
        self.top_gen = top_gen
        self.bottom_gen = bottom_gen

    def fit(self, X=None, y=None):
        if self.measure is None:
            raise HaarError("HaarTransformer needs a measure")
        grid = self.grid
        if grid is None:
            grid = ShiftedDyadicGrid(self.measure.dim, self.measure.depth)
        self.basis_ = HaarBasis(self.measure, grid, self.top_gen, self.bottom_gen)
        self.keys_ = self.basis_.keys()
        self.n_features_in_ = self.measure.n_atoms
        return self

    def transform(self, X):
        check_is_fitted(self, "basis_")
        X = _check_rows(X, self.n_features_in_)
        return X @ self.basis_.HW.T

    def inverse_transform(self, C):
        check_is_fitted(self, "basis_")
        C = _check_rows(C, self.basis_.n_funcs)
        return C @ self.basis_.H


def _check_rows(X, n):
    from sklearn.utils.validation import check_array
    X = check_array(X, ensure_2d=False, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != n:
        raise HaarError(f"expected {n} columns, got {X.shape[1]}")
    return X
