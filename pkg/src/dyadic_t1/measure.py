"""Atomic measures on dyadic lattices and dominating functions for them.

Atoms sit at the lattice points k * 2**-N of the box [0, 2**L)**dim.  Every
geometric query is answered in integer lattice units (one unit = 2**-N), so
ball and cube membership is exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeasureError(ValueError):
    pass


@dataclass(eq=False)
class AtomicMeasure:
    """Nonnegative weights on the lattice of [0, 2**L)**dim with spacing 2**-N.

    ``weights`` has shape ``(2**(N+L),) * dim``.  Flat atom indices follow
    C order, the same order used by every function array in the package.
    """

    dim: int
    N: int
    L: int
    weights: np.ndarray

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise MeasureError(f"dim must be 1 or 2, got {self.dim}")
        if self.N < 0 or self.L < 0:
            raise MeasureError("N and L must be nonnegative")
        w = np.asarray(self.weights)
        if w.dtype.kind not in "iuf":
            raise MeasureError("weights must be numeric")
        w = w.reshape((self.side,) * self.dim)
        if not np.all(np.isfinite(w)):
            raise MeasureError("weights must be finite")
        if np.any(w < 0):
            raise MeasureError("negative weights")
        w.setflags(write=False)
        self.weights = w

    @property
    def depth(self) -> int:
        return self.N + self.L

    @property
    def side(self) -> int:
        return 2 ** (self.N + self.L)

    @property
    def spacing(self) -> float:
        return 2.0 ** -self.N

    @property
    def n_atoms(self) -> int:
        return self.side ** self.dim

    @property
    def flat(self) -> np.ndarray:
        return self.weights.reshape(-1)

    @property
    def total(self) -> float:
        return float(self.flat.sum())

    @property
    def is_integral(self) -> bool:
        w = self.flat
        return w.dtype.kind in "iu" or bool(np.all(w == np.round(w)))

    def lattice_points(self) -> np.ndarray:
        """Integer coordinates of all atoms, shape (n_atoms, dim)."""
        idx = np.indices((self.side,) * self.dim).reshape(self.dim, -1)
        return idx.T.copy()

    def coords(self) -> np.ndarray:
        return self.lattice_points() * self.spacing

    def to_dict(self) -> dict:
        w = self.flat
        if w.dtype.kind in "iu":
            vals = [int(v) for v in w]
        else:
            vals = [float(v) for v in w]
        return {"dim": self.dim, "N": self.N, "L": self.L, "weights": vals}

    @classmethod
    def from_dict(cls, d: dict) -> "AtomicMeasure":
        try:
            dim, N, L = int(d["dim"]), int(d["N"]), int(d["L"])
            raw = d["weights"]
        except KeyError as exc:
            raise MeasureError(f"measure document missing field {exc}") from None
        w = np.asarray(raw)
        if w.size != (2 ** (N + L)) ** dim:
            raise MeasureError(f"expected {(2 ** (N + L)) ** dim} weights, got {w.size}")
        return cls(dim, N, L, w)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "AtomicMeasure":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(eq=False)
class ProductMeasure:
    factor_1: AtomicMeasure
    factor_2: AtomicMeasure

    @property
    def shape(self) -> tuple[int, int]:
        return (self.factor_1.n_atoms, self.factor_2.n_atoms)

    def weights(self) -> np.ndarray:
        """Product weights as an (n1, n2) array over flat atom indices."""
        return np.multiply.outer(self.factor_1.flat, self.factor_2.flat)

    def rectangle_mass(self, atoms_1, atoms_2):
        return self.factor_1.flat[atoms_1].sum() * self.factor_2.flat[atoms_2].sum()

    def mass(self, mask: np.ndarray) -> float:
        return float((self.weights() * mask).sum())


# -- dominating functions -----------------------------------------------------


class DominatingFunction:
    """Base class: lambda(x, r) at points x (real coords, shape (..., dim))."""

    dim: int = 1
    doubling_constant: float = 1.0

    def __call__(self, x, r):
        raise NotImplementedError

    @property
    def d_lambda(self) -> float:
        return d_lambda(self.doubling_constant)


class PowerLaw(DominatingFunction):
    """lambda(x, r) = C * r**d, independent of x."""

    def __init__(self, C: float = 1.0, d: float = 1.0, dim: int = 1):
        if C <= 0 or d < 0:
            raise MeasureError("PowerLaw needs C > 0 and d >= 0")
        self.C = float(C)
        self.d = float(d)
        self.dim = dim
        self.doubling_constant = 2.0 ** self.d

    def __call__(self, x, r):
        r = np.asarray(r, dtype=float)
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1] if x.ndim else (), r.shape)
        return np.broadcast_to(self.C * r ** self.d, shape).copy()

    def __repr__(self):
        return f"PowerLaw(C={self.C}, d={self.d})"


class Tabulated(DominatingFunction):
    """lambda on the mesh (lattice point, 2**k * 2**-N), k = 0..K-1.

    Off-mesh radii round up to the next mesh radius, which keeps
    monotonicity and turns mesh doubling into doubling for every radius.
    Radii past the mesh extrapolate by the doubling constant.
    """

    def __init__(self, N: int, L: int, dim: int, values, doubling_constant=None):
        values = np.asarray(values, dtype=float)
        side = 2 ** (N + L)
        if values.ndim != 2 or values.shape[0] != side ** dim:
            raise MeasureError("values must have shape (n_points, K)")
        if np.any(values <= 0) or not np.all(np.isfinite(values)):
            raise MeasureError("tabulated lambda must be positive and finite")
        self.N, self.L, self.dim = N, L, dim
        self.side = side
        self.values = values
        self.values.setflags(write=False)
        if doubling_constant is None:
            ratios = values[:, 1:] / values[:, :-1]
            doubling_constant = float(max(1.0, ratios.max())) if ratios.size else 1.0
        self.doubling_constant = float(doubling_constant)

    @property
    def radii(self) -> np.ndarray:
        return 2.0 ** (np.arange(self.values.shape[1]) - self.N)

    @classmethod
    def from_callable(cls, fn, N, L, dim=1, K=None, doubling_constant=None):
        side = 2 ** (N + L)
        K = N + L + 2 if K is None else K
        pts = np.indices((side,) * dim).reshape(dim, -1).T * 2.0 ** -N
        radii = 2.0 ** (np.arange(K) - N)
        vals = np.array([[fn(p if dim > 1 else p[0], r) for r in radii] for p in pts], dtype=float)
        return cls(N, L, dim, vals, doubling_constant)

    def point_index(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        p = np.clip(np.floor(x * 2.0 ** self.N + 0.5).astype(np.int64), 0, self.side - 1)
        if self.dim == 1:
            return p[..., 0] if (x.ndim and x.shape[-1] == 1) else p
        return np.ravel_multi_index(tuple(np.moveaxis(p, -1, 0)), (self.side,) * self.dim)

    def _radius_index(self, r):
        r = np.asarray(r, dtype=float)
        rho = np.maximum(r * 2.0 ** self.N, 1.0)
        k = np.ceil(np.log2(rho)).astype(np.int64)
        return k

    def __call__(self, x, r):
        idx = self.point_index(x)
        k = self._radius_index(r)
        idx, k = np.broadcast_arrays(idx, k)
        K = self.values.shape[1]
        kk = np.minimum(k, K - 1)
        out = self.values[idx, kk]
        extra = k - kk
        if np.any(extra > 0):
            out = out * self.doubling_constant ** extra
        return out


def d_lambda(C) -> float:
    C = getattr(C, "doubling_constant", C)
    if C <= 0:
        raise MeasureError("doubling constant must be positive")
    return math.log2(C)


# -- ball masses --------------------------------------------------------------


def ball_measure(mu: AtomicMeasure, x, r: float) -> float:
    """mu of the closed l-infinity ball B(x, r)."""
    if r <= 0:
        raise MeasureError("radius must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    scale = 2.0 ** mu.N
    centre = x * scale
    rad = r * scale
    lo = np.maximum(np.ceil(centre - rad), 0).astype(int)
    hi = np.minimum(np.floor(centre + rad), mu.side - 1).astype(int)
    if np.any(hi < lo):
        return 0.0
    sl = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
    return float(mu.weights[sl].sum())


def _box_sums(mu: AtomicMeasure, half_width: int) -> np.ndarray:
    """Masses of closed balls of lattice radius half_width about every atom."""
    w = mu.weights.astype(float)
    out = w
    for axis in range(mu.dim):
        c = np.cumsum(out, axis=axis)
        c = np.concatenate([np.zeros_like(np.take(c, [0], axis=axis)), c], axis=axis)
        n = mu.side
        hi = np.minimum(np.arange(n) + half_width + 1, n)
        lo = np.maximum(np.arange(n) - half_width, 0)
        out = np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)
    return out.reshape(-1)


def default_radii(mu: AtomicMeasure) -> np.ndarray:
    return 2.0 ** (np.arange(mu.depth + 2) - mu.N)


@dataclass
class UpperDoublingReport:
    max_ratio: float
    worst_pair: tuple
    passed: bool


def verify_upper_doubling(mu: AtomicMeasure, lam: DominatingFunction, radii=None,
                          tol: float = 1e-12) -> UpperDoublingReport:
    """Scan mu(B(x, r)) / lambda(x, r) over lattice points x and the radius mesh."""
    radii = default_radii(mu) if radii is None else np.asarray(radii, dtype=float)
    pts = mu.coords()
    best, worst = 0.0, (None, None)
    for r in radii:
        hw = int(math.floor(r * 2.0 ** mu.N + 1e-12))
        masses = _box_sums(mu, hw)
        lam_vals = lam(pts, np.full(len(pts), r))
        ratio = masses / lam_vals
        i = int(np.argmax(ratio))
        if ratio[i] > best:
            best = float(ratio[i])
            worst = (tuple(float(c) for c in pts[i]), float(r))
    return UpperDoublingReport(best, worst, best <= 1 + tol)


# -- symmetrization -----------------------------------------------------------


def symmetrize(lam: DominatingFunction, mu: AtomicMeasure, K=None) -> Tabulated:
    """Lambda(x, r) = min over lattice z of lambda(z, r + |x - z|), on the mesh."""
    if mu.n_atoms == 0:
        raise MeasureError("empty domain")
    K = mu.depth + 2 if K is None else K
    pts = mu.coords()
    dist = np.abs(pts[:, None, :] - pts[None, :, :]).max(axis=-1)
    radii = 2.0 ** (np.arange(K) - mu.N)
    z = np.broadcast_to(pts[None, :, :], dist.shape + (mu.dim,))
    vals = np.empty((len(pts), K))
    for k, r in enumerate(radii):
        vals[:, k] = lam(z, r + dist).min(axis=1)
    return Tabulated(mu.N, mu.L, mu.dim, vals, doubling_constant=lam.doubling_constant)


def check_symmetrized(Lam: Tabulated, lam: DominatingFunction, mu: AtomicMeasure,
                      tol: float = 1e-12) -> dict:
    """The five properties of the symmetrized function, checked on the mesh.

    Returns the worst excess for each, where <= 0 (up to tol) means it holds.
    The ball bound is only meaningful when mu is upper doubling for lam.
    """
    pts = mu.coords()
    radii = Lam.radii
    C = lam.doubling_constant
    L = Lam.values
    lam_vals = np.stack([lam(pts, np.full(len(pts), r)) for r in radii], axis=1)
    out = {
        "below_lambda": float((L - lam_vals).max() / lam_vals.max()),
        "monotone": float((L[:, :-1] - L[:, 1:]).max(initial=0.0)),
        "doubling": float((L[:, 1:] - C * L[:, :-1]).max(initial=0.0)),
    }
    dist = np.abs(pts[:, None, :] - pts[None, :, :]).max(axis=-1)
    worst = 0.0
    for k, r in enumerate(radii):
        near = dist <= r + 1e-12
        excess = L[:, None, k] - C * L[None, :, k]
        worst = max(worst, float(np.where(near, excess, -np.inf).max()))
    out["comparable"] = worst
    ball = 0.0
    for k, r in enumerate(radii):
        hw = int(math.floor(r * 2.0 ** mu.N + 1e-12))
        ball = max(ball, float((_box_sums(mu, hw) - L[:, k]).max()))
    out["dominates_balls"] = ball
    out["passed"] = all(v <= tol * max(1.0, float(L.max())) for v in out.values())
    return out


# -- corpus generation --------------------------------------------------------


def generate_measure(kind="uniform", seed=None, N=8, L=0, dim=1, **params) -> AtomicMeasure:
    """Test-corpus measures.

    kinds: uniform, random_iid (float weights, optional ``zero_prob``),
    random_int (integer weights in [0, high], optional ``zero_prob``),
    cantor_like (``p`` in [0, 1]; each pair of levels splits mass 1:p:p:1),
    point_masses (``masses`` = list of (index, weight), optional integer
    ``background``).
    """
    side = 2 ** (N + L)
    shape = (side,) * dim
    rng = np.random.default_rng(seed)
    cell = 2.0 ** (-N * dim)
    if kind == "uniform":
        w = np.full(shape, cell)
    elif kind == "random_iid":
        w = rng.uniform(0.0, 1.0, size=shape) * cell
        zp = params.get("zero_prob", 0.0)
        if zp:
            w[rng.random(shape) < zp] = 0.0
    elif kind == "random_int":
        high = int(params.get("high", 9))
        w = rng.integers(0, high + 1, size=shape).astype(np.int64)
        zp = params.get("zero_prob", 0.0)
        if zp:
            w[rng.random(shape) < zp] = 0
    elif kind == "cantor_like":
        p = float(params.get("p", 0.0))
        if not 0.0 <= p <= 1.0:
            raise MeasureError("cantor_like needs p in [0, 1]")
        w1 = _cantor_weights(N + L, p)
        w = w1 if dim == 1 else np.multiply.outer(w1, w1)
        w = w * (side ** dim * cell) / w.sum()
    elif kind == "point_masses":
        bg = params.get("background", 0)
        w = np.full(shape, bg, dtype=np.int64 if isinstance(bg, int) else float)
        for idx, mass in params.get("masses", []):
            if mass < 0:
                raise MeasureError("negative weights")
            idx = tuple(np.atleast_1d(idx))
            if isinstance(mass, float) and w.dtype.kind == "i":
                w = w.astype(float)
            w[idx] += mass
    else:
        raise MeasureError(f"unknown measure kind {kind!r}")
    return AtomicMeasure(dim, N, L, w)


def _cantor_weights(levels: int, p: float) -> np.ndarray:
    w = np.ones(1)
    k = 0
    while k + 2 <= levels:
        w = np.kron(w, np.array([1.0, p, p, 1.0]))
        k += 2
    if k < levels:
        w = np.kron(w, np.ones(2))
    return w
