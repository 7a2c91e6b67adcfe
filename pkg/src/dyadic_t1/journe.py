"""Journé's covering lemma on a product of dyadic grids with an arbitrary product measure.

Rectangles are pairs (gid_1, gid_2) of global cube ids.  With integer
weights every mass below is an integer held exactly in float64, and the
weighted sums are accumulated as Fractions.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .spaces import OmegaSet, RectangleFamily


class JourneError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddednessRecord:
    rect: tuple
    emb1: int
    capped: bool


def tilde_omega(omega: OmegaSet, fam: RectangleFamily) -> OmegaSet:
    """{M chi_Omega > 1/2}; rectangles of zero mass are skipped."""
    if not omega.mask.any():
        raise JourneError("empty Omega")
    return OmegaSet.from_mask(fam, fam.tilde(omega.mask))


def two_maximal(omega: OmegaSet, fam: RectangleFamily) -> list[tuple]:
    """I x J inside Omega with I x parent(J) not inside Omega (or J at the top)."""
    if not omega.mask.any():
        return []
    inside = fam.contained(omega.mask)
    par2 = fam.grid_2.parent_gid
    top = par2 < 0
    up = np.zeros_like(inside)
    up[:, ~top] = inside[:, par2[~top]]
    sel = inside & ~up
    return [tuple(map(int, ij)) for ij in np.argwhere(sel)]


def _ancestor_chain(fam: RectangleFamily, gid_1: int) -> list[int]:
    par = fam.grid_1.parent_gid
    out = [gid_1]
    while par[out[-1]] >= 0:
        out.append(int(par[out[-1]]))
    return out


def emb1(rect, omega: OmegaSet, fam: RectangleFamily, tilde_inside=None) -> EmbeddednessRecord:
    """Largest k with I^(k) x J inside the enlargement, capped at the top generation."""
    if tilde_inside is None:
        tilde_inside = fam.contained(tilde_omega(omega, fam).mask)
    i, j = rect
    if not tilde_inside[i, j]:
        raise JourneError("rectangle is not inside the enlargement")
    chain = _ancestor_chain(fam, i)
    k = 0
    while k + 1 < len(chain) and tilde_inside[chain[k + 1], j]:
        k += 1
    return EmbeddednessRecord((int(i), int(j)), k, k + 1 == len(chain))


def emb1_all(rects, fam: RectangleFamily, tilde_inside) -> np.ndarray:
    """Vectorized emb1 (-1 where the rectangle is not inside the enlargement)."""
    if not rects:
        return np.zeros(0, dtype=int)
    R = np.asarray(rects)
    cur = R[:, 0].copy()
    J = R[:, 1]
    emb = np.where(tilde_inside[cur, J], 0, -1)
    alive = emb == 0
    par = fam.grid_1.parent_gid
    while alive.any():
        nxt = np.where(alive, par[cur], -1)
        ok = alive & (nxt >= 0)
        ok[ok] = tilde_inside[nxt[ok], J[ok]]
        emb[ok] += 1
        cur = np.where(ok, nxt, cur)
        alive = ok
    return emb


def _check_weight(omega_fn, K):
    vals = [Fraction(omega_fn(k)) for k in range(K + 2)]
    if any(v < 0 for v in vals):
        raise JourneError("weight must be nonnegative")
    if any(b > a for a, b in zip(vals, vals[1:])):
        raise JourneError("weight must be non-increasing")
    return vals


def geometric(q=Fraction(1, 2)):
    q = Fraction(q)
    return lambda k: q ** k


def inverse_square(k):
    return Fraction(1, (k + 1) ** 2)


def parse_weight(spec: str):
    kind, _, arg = spec.partition(":")
    if kind == "geometric":
        return geometric(Fraction(arg or "1/2").limit_denominator(10 ** 6))
    if kind == "inverse_square":
        return inverse_square
    raise JourneError(f"unknown weight {spec!r}")


@dataclass
class JourneReport:
    lhs: Fraction
    rhs: Fraction
    passed: bool
    n_maximal: int
    capped: int
    K: int
    omega_mass: Fraction

    def to_dict(self):
        return {"lhs": float(self.lhs), "rhs": float(self.rhs), "pass": self.passed,
                "n_maximal": self.n_maximal, "capped": self.capped, "K": self.K,
                "omega_mass": float(self.omega_mass),
                "ratio": float(self.lhs / self.rhs) if self.rhs else 0.0}


def _rect_masses(fam, rects):
    R = np.asarray(rects)
    return fam.m1[R[:, 0]], fam.m2[R[:, 1]]


def _exact(x) -> Fraction:
    return Fraction(int(x)) if float(x).is_integer() else Fraction(float(x))


def _integral(*arrs) -> bool:
    return all(np.all(a == np.round(a)) and np.all(np.abs(a) < 2 ** 31) for a in arrs)


def _exact_dot(x, y) -> Fraction:
    """sum of x * y without rounding."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if _integral(x, y):
        return Fraction(int(np.dot(x.astype(np.int64), y.astype(np.int64))))
    return sum((Fraction(float(a)) * Fraction(float(b)) for a, b in zip(x, y)), Fraction(0))


def _exact_mass(fam, mask):
    rows = (mask * fam.w2[None, :]).sum(axis=1)
    return _exact_dot(fam.w1, rows)


@dataclass
class JourneData:
    """2-maximal rectangles of Omega with their embeddedness."""

    rects: list
    emb: np.ndarray
    mass_1: np.ndarray
    mass_2: np.ndarray
    omega_mass: Fraction


def journe_data(omega: OmegaSet, fam: RectangleFamily) -> JourneData:
    rects = two_maximal(omega, fam)
    tin = fam.contained(fam.tilde(omega.mask))
    emb = emb1_all(rects, fam, tin)
    if rects:
        a, b = _rect_masses(fam, rects)
    else:
        a = b = np.zeros(0)
    if np.any((emb < 0) & (a > 0) & (b > 0)):
        raise JourneError("positive-mass rectangle of Omega outside its enlargement")
    return JourneData(rects, emb, a, b, _exact_mass(fam, omega.mask))


def verify_journe(omega: OmegaSet, omega_fn, fam: RectangleFamily, K: int | None = None,
                  data: JourneData | None = None) -> JourneReport:
    """lhs = sum over 2-maximal R of w(emb1) mu(R); rhs = 2 sum_{k<=K} w(k) mu(Omega).

    K defaults to the depth of the first grid, the largest value emb1 can
    take; the right side truncated at that K still dominates the left.
    """
    K = fam.grid_1.depth if K is None else K
    vals = _check_weight(omega_fn, K)
    d = journe_data(omega, fam) if data is None else data
    lhs = Fraction(0)
    capped = 0
    if d.rects:
        gens = fam.grid_1.cube_gens[np.asarray(d.rects)[:, 0]]
        capped = int((d.emb == gens).sum())
        e = np.minimum(d.emb, K)
        for k in np.unique(e[e >= 0]):
            sel = e == k
            lhs += vals[int(k)] * _exact_dot(d.mass_1[sel], d.mass_2[sel])
    rhs = 2 * sum(vals[: K + 1], Fraction(0)) * d.omega_mass
    return JourneReport(lhs, rhs, lhs <= rhs, len(d.rects), capped, K, d.omega_mass)


@dataclass
class ClaimReport:
    k: int
    i: int
    size: int
    disjoint: bool
    half_mass: bool
    worst_ratio: float

    def to_dict(self):
        return self.__dict__.copy()


def verify_ER_claim(omega: OmegaSet, k: int, i: int, fam: RectangleFamily,
                    data: JourneData | None = None) -> ClaimReport:
    """E(R) = I x (J minus the J' of members with I' strictly above I), for R in R(k, i)."""
    d = journe_data(omega, fam) if data is None else data
    rects, emb = d.rects, d.emb
    if not rects:
        return ClaimReport(k, i, 0, True, True, 1.0)
    R = np.asarray(rects)
    gens = fam.grid_1.cube_gens[R[:, 0]]
    # emb1 = -1 stands for sup of the empty set, so those rectangles belong too
    sel = (emb <= k) & (gens % (k + 1) == i % (k + 1))
    R = R[sel]
    if len(R) == 0:
        return ClaimReport(k, i, 0, True, True, 1.0)
    Z1 = fam.Z1[R[:, 0]] > 0
    Z2 = fam.Z2[R[:, 1]] > 0
    # strict ancestry in the first factor
    above = fam.descendants_1[np.ix_(R[:, 0], R[:, 0])].T & (R[:, 0][None, :] != R[:, 0][:, None])
    # above[a, b]: I_b strictly contains I_a
    Jrest = Z2.copy()
    for a in range(len(R)):
        up = np.nonzero(above[a])[0]
        if len(up):
            Jrest[a] &= ~Z2[up].any(axis=0)
    m_rest = Jrest.astype(float) @ fam.w2
    m1 = fam.m1[R[:, 0]]
    m2 = fam.m2[R[:, 1]]
    # disjointness: E(R) n E(R') = (I n I') x (Jrest n Jrest')
    meet1 = (Z1.astype(float) @ Z1.T.astype(float)) > 0
    meet2 = (Jrest.astype(float) @ Jrest.T.astype(float)) > 0
    both = meet1 & meet2
    np.fill_diagonal(both, False)
    disjoint = not both.any()
    if _integral(m1, m2, m_rest):
        a1 = m1.astype(np.int64)
        half = bool(np.all(2 * a1 * m_rest.astype(np.int64) >= a1 * m2.astype(np.int64)))
    else:
        half = all(2 * _exact(r) >= _exact(y) for x, y, r in zip(m1, m2, m_rest) if x)
    pos = (m1 > 0) & (m2 > 0)
    worst = float((m_rest[pos] / m2[pos]).min()) if pos.any() else 1.0
    return ClaimReport(k, i, len(R), disjoint, half, worst)


def verify_all_claims(omega: OmegaSet, fam: RectangleFamily, K: int | None = None,
                      data: JourneData | None = None) -> list[ClaimReport]:
    K = fam.grid_1.depth if K is None else K
    d = journe_data(omega, fam) if data is None else data
    return [verify_ER_claim(omega, k, i, fam, d) for k in range(K + 1) for i in range(k + 1)]


def random_omega(fam: RectangleFamily, rng, max_rects: int = 8, min_gen: int = 0,
                 max_gen: int | None = None) -> OmegaSet:
    """Union of 1..max_rects random rectangles with generations in [min_gen, max_gen]."""
    g1, g2 = fam.grid_1, fam.grid_2
    max_gen = min(g1.depth, g2.depth) if max_gen is None else max_gen
    rects = []
    for _ in range(int(rng.integers(1, max_rects + 1))):
        a = int(rng.integers(min_gen, max_gen + 1))
        b = int(rng.integers(min_gen, max_gen + 1))
        i = g1.gid_start(a) + int(rng.integers(g1.n_cubes(a)))
        j = g2.gid_start(b) + int(rng.integers(g2.n_cubes(b)))
        rects.append((i, j))
    return OmegaSet.from_rects(fam, rects)
