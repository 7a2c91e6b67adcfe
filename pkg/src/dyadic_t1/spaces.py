"""Rectangle families, strong maximal function, square function, BMO estimates.

Sets are sets of lattice atoms.  A rectangle S is contained in Omega when
every atom of S (inside the box) lies in Omega, which is the containment used
by every level-set argument below.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .grid import DyadicCube, ShiftedDyadicGrid
from .haar import FactorSystem
from .measure import AtomicMeasure
from ._validation import check_product_function


class SpacesError(ValueError):
    pass


class RectangleFamily:
    """All rectangles K x L with K in grid_1 and L in grid_2 (every generation)."""

    def __init__(self, grid_1: ShiftedDyadicGrid, grid_2: ShiftedDyadicGrid,
                 mu_1: AtomicMeasure, mu_2: AtomicMeasure):
        self.grid_1, self.grid_2 = grid_1, grid_2
        self.mu_1, self.mu_2 = mu_1, mu_2
        self.w1 = mu_1.flat.astype(float)
        self.w2 = mu_2.flat.astype(float)
        self.Z1 = grid_1.indicator_matrix()
        self.Z2 = grid_2.indicator_matrix()
        self.m1 = self.Z1 @ self.w1
        self.m2 = self.Z2 @ self.w2
        self.c1 = grid_1.atom_counts.astype(float)
        self.c2 = grid_2.atom_counts.astype(float)

    @property
    def shape(self):
        return (self.grid_1.n_atoms, self.grid_2.n_atoms)

    def weights(self) -> np.ndarray:
        return np.multiply.outer(self.w1, self.w2)

    def rect_masses(self) -> np.ndarray:
        return np.multiply.outer(self.m1, self.m2)

    def block_sums(self, F) -> np.ndarray:
        """Sum of F * mu over every rectangle, shape (n_cubes_1, n_cubes_2)."""
        return (self.Z1 * self.w1) @ F @ (self.Z2 * self.w2).T

    def contained(self, mask) -> np.ndarray:
        """Boolean (n_cubes_1, n_cubes_2): rectangle atoms all in ``mask``."""
        inside = self.Z1 @ np.asarray(mask, dtype=float) @ self.Z2.T
        return inside == np.multiply.outer(self.c1, self.c2)

    def spread(self, R: np.ndarray, reduce=np.maximum, fill=0.0) -> np.ndarray:
        """Atom array: reduce over all rectangles containing the atom of R[c1, c2]."""
        g1, g2 = self.grid_1, self.grid_2
        out = None
        for a in range(g1.depth + 1):
            s = g1.gid_start(a)
            block = R[s: s + g1.n_cubes(a)]
            acc = None
            for b in range(g2.depth + 1):
                cols = block[:, g2.global_labels(b)]
                acc = cols if acc is None else reduce(acc, cols)
            rows = acc[g1.labels(a)]
            out = rows if out is None else reduce(out, rows)
        return out

    def maximal(self, u) -> np.ndarray:
        """Strong maximal function: max of <|u|>_S over S containing the atom."""
        sums = self.block_sums(np.abs(np.asarray(u, dtype=float)))
        mass = self.rect_masses()
        avg = np.where(mass > 0, sums / np.where(mass > 0, mass, 1.0), 0.0)
        return self.spread(avg)

    def tilde(self, mask) -> np.ndarray:
        """{M chi_mask > 1/2}, compared as 2 mu(S n mask) > mu(S)."""
        sums = self.block_sums(np.asarray(mask, dtype=float))
        hit = (2 * sums > self.rect_masses()) & (self.rect_masses() > 0)
        return self.spread(hit, reduce=np.logical_or).astype(bool)

    @cached_property
    def _sorted_labels(self):
        out = []
        for grid in (self.grid_1, self.grid_2):
            per = []
            for g in range(grid.depth + 1):
                lab = grid.labels(g)
                perm = np.argsort(lab, kind="stable")
                starts = np.searchsorted(lab[perm], np.arange(grid.n_cubes(g)))
                per.append((perm, starts))
            out.append(per)
        return out

    def block_min(self, V) -> np.ndarray:
        """Minimum of V over the atoms of every rectangle."""
        V = np.asarray(V, dtype=float)
        g1, g2 = self.grid_1, self.grid_2
        s1, s2 = self._sorted_labels
        out = np.empty((g1.n_cubes_total, g2.n_cubes_total))
        for a in range(g1.depth + 1):
            perm, starts = s1[a]
            rows = np.minimum.reduceat(V[perm], starts, axis=0)
            ra = g1.gid_start(a)
            for b in range(g2.depth + 1):
                p2, st2 = s2[b]
                blk = np.minimum.reduceat(rows[:, p2], st2, axis=1)
                rb = g2.gid_start(b)
                out[ra: ra + len(starts), rb: rb + len(st2)] = blk
        return out

    @cached_property
    def descendants_1(self) -> np.ndarray:
        return (self.Z1 @ self.Z1.T) == self.c1[None, :]

    @cached_property
    def descendants_2(self) -> np.ndarray:
        return (self.Z2 @ self.Z2.T) == self.c2[None, :]

    def rect_mask(self, gid_1: int, gid_2: int) -> np.ndarray:
        return np.multiply.outer(self.Z1[gid_1] > 0, self.Z2[gid_2] > 0)


def one_param_maximal(V, grid: ShiftedDyadicGrid, mu: AtomicMeasure, axis: int = -1) -> np.ndarray:
    """Dyadic maximal function of |V| along one axis (other axes are batch)."""
    V = np.moveaxis(np.abs(np.asarray(V, dtype=float)), axis, -1)
    w = mu.flat.astype(float)
    out = np.zeros_like(V)
    for g in range(grid.depth + 1):
        lab = grid.labels(g)
        n = grid.n_cubes(g)
        m = np.bincount(lab, weights=w, minlength=n)
        flat = V.reshape(-1, V.shape[-1])
        sums = np.zeros((flat.shape[0], n))
        np.add.at(sums.T, lab, (flat * w).T)
        avg = np.where(m > 0, sums / np.where(m > 0, m, 1.0), 0.0)
        out = np.maximum(out, avg[:, lab].reshape(V.shape))
    return np.moveaxis(out, -1, axis)


@dataclass
class OmegaSet:
    """A set of atoms of the product box, with generating rectangles if known."""

    mask: np.ndarray
    rects: list = field(default_factory=list)
    mass: float = 0.0

    @classmethod
    def from_rects(cls, family: RectangleFamily, rects) -> "OmegaSet":
        mask = np.zeros(family.shape, dtype=bool)
        for a, b in rects:
            mask |= family.rect_mask(a, b)
        return cls(mask, list(rects), float((family.weights() * mask).sum()))

    @classmethod
    def from_mask(cls, family: RectangleFamily, mask) -> "OmegaSet":
        mask = np.asarray(mask, dtype=bool)
        return cls(mask, [], float((family.weights() * mask).sum()))

    def generators(self, family: RectangleFamily) -> list:
        """Maximal rectangles inside the set; they cover it when it is a union of rectangles."""
        inside = family.contained(self.mask) & (np.multiply.outer(family.c1, family.c2) > 0)
        return [tuple(map(int, ij)) for ij in np.argwhere(inside)]


def strong_maximal(u, family: RectangleFamily) -> np.ndarray:
    return family.maximal(u)


# -- product system: goodness windows on both factors -------------------------


class ProductSystem:
    """Pairs two FactorSystems; rectangles S live in the two ``other`` grids."""

    def __init__(self, sys_1: FactorSystem, sys_2: FactorSystem):
        self.sys_1, self.sys_2 = sys_1, sys_2
        self.family = RectangleFamily(sys_1.other, sys_2.other, sys_1.mu, sys_2.mu)
        self.window = np.multiply.outer(sys_1.in_window, sys_2.in_window)

    @property
    def shape(self):
        return (self.sys_1.grid.n_atoms, self.sys_2.grid.n_atoms)

    def weights(self):
        return self.family.weights()

    def coefficients(self, F) -> np.ndarray:
        F = check_product_function(F, self.shape)
        return self.sys_1.basis.HW @ F @ self.sys_2.basis.HW.T

    def synthesize(self, C) -> np.ndarray:
        return self.sys_1.basis.H.T @ C @ self.sys_2.basis.H

    def window_part(self, F) -> np.ndarray:
        return self.synthesize(self.coefficients(F) * self.window)

    def energy(self, C) -> np.ndarray:
        """E[S1, S2] = sum of |c_R|**2 over the window R with S(R) = (S1, S2)."""
        C2 = (np.asarray(C) ** 2) * self.window
        return self.sys_1.Q @ C2 @ self.sys_2.Q.T

    def square_function(self, F=None, C=None) -> np.ndarray:
        if C is None:
            C = self.coefficients(F)
        C2 = (np.asarray(C) ** 2) * self.window
        return np.sqrt(np.maximum(self.sys_1.P.T @ C2 @ self.sys_2.P, 0.0))

    def ratio(self, E, mask) -> tuple[float, float, float]:
        """(ratio, energy inside, mu(Omega)) for one atom set."""
        mass = float((self.weights() * mask).sum())
        inside = float(E[self.family.contained(mask)].sum())
        if mass <= 0:
            return 0.0, inside, mass
        return float(np.sqrt(inside / mass)), inside, mass

    def level_set_ratio(self, E, V):
        """sup over t of the ratio on {V > t}, exact over the values of V.

        Returns (L, threshold) where the sup is attained on {V >= threshold}.
        """
        m = self.family.block_min(V)
        vals = np.unique(V)
        Ef = E.reshape(-1)
        mf = m.reshape(-1)
        order = np.argsort(mf)
        m_sorted, E_sorted = mf[order], Ef[order]
        e_tail = np.concatenate([np.cumsum(E_sorted[::-1])[::-1], [0.0]])
        w = self.weights().reshape(-1)
        vf = V.reshape(-1)
        vo = np.argsort(vf)
        v_sorted, w_sorted = vf[vo], w[vo]
        w_tail = np.concatenate([np.cumsum(w_sorted[::-1])[::-1], [0.0]])
        i_e = np.searchsorted(m_sorted, vals, side="left")
        i_w = np.searchsorted(v_sorted, vals, side="left")
        num, den = e_tail[i_e], w_tail[i_w]
        rat = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        k = int(np.argmax(rat))
        return float(np.sqrt(max(rat[k], 0.0))), float(vals[k])


@dataclass
class BmoProdEstimate:
    value: float
    witness: OmegaSet | None
    family: str
    evaluated: int = 0

    def to_dict(self) -> dict:
        w = self.witness
        return {"value": self.value, "family": self.family, "evaluated": self.evaluated,
                "witness": None if w is None else {"mass": w.mass, "rects": w.rects,
                                                   "atoms": int(w.mask.sum())}}


def bmo_prod_estimate(b, psys: ProductSystem, family="single_rects", **opts) -> BmoProdEstimate:
    """Lower bound for the product BMO norm of b over a family of sets.

    family: single_rects | random_unions (k, trials, seed) | level_sets (u) | greedy
    (candidates, rounds), or a list of such names to take the best.
    """
    E = psys.energy(psys.coefficients(b))
    return _estimate_from_energy(E, psys, family, **opts)


def _estimate_from_energy(E, psys, family, **opts) -> BmoProdEstimate:
    if isinstance(family, (list, tuple)):
        if not family:
            raise SpacesError("family empty")
        best = None
        for fam in family:
            est = _estimate_from_energy(E, psys, fam, **opts)
            if best is None or est.value > best.value:
                best = est
        return best
    fam = psys.family
    if family == "single_rects":
        sums = fam.descendants_1.astype(float) @ E @ fam.descendants_2.astype(float).T
        mass = fam.rect_masses()
        rat = np.where(mass > 0, sums / np.where(mass > 0, mass, 1.0), 0.0)
        i, j = np.unravel_index(int(np.argmax(rat)), rat.shape)
        w = OmegaSet.from_rects(fam, [(int(i), int(j))])
        return BmoProdEstimate(float(np.sqrt(max(rat[i, j], 0.0))), w, family, rat.size)
    if family == "random_unions":
        k, trials = int(opts.get("k", 4)), int(opts.get("trials", 64))
        rng = np.random.default_rng(opts.get("seed", 0))
        n1, n2 = len(fam.m1), len(fam.m2)
        best, wit = 0.0, None
        for _ in range(trials):
            rects = [(int(rng.integers(n1)), int(rng.integers(n2))) for _ in range(int(rng.integers(1, k + 1)))]
            om = OmegaSet.from_rects(fam, rects)
            val = psys.ratio(E, om.mask)[0]
            if wit is None or val > best:
                best, wit = val, om
        return BmoProdEstimate(best, wit, family, trials)
    if family == "level_sets":
        u = opts.get("u")
        if u is None:
            raise SpacesError("level_sets needs u")
        V = fam.maximal(u)
        val, thr = psys.level_set_ratio(E, V)
        return BmoProdEstimate(val, OmegaSet.from_mask(fam, V >= thr), family, len(np.unique(V)))
    if family == "greedy":
        return _greedy(E, psys, int(opts.get("candidates", 24)), int(opts.get("rounds", 6)))
    raise SpacesError(f"unknown family {family!r}")


def _greedy(E, psys, n_cand, rounds) -> BmoProdEstimate:
    fam = psys.family
    start = _estimate_from_energy(E, psys, "single_rects")
    sums = fam.descendants_1.astype(float) @ E @ fam.descendants_2.astype(float).T
    mass = fam.rect_masses()
    dens = np.where(mass > 0, sums / np.where(mass > 0, mass, 1.0), 0.0)
    flat = np.argsort(-dens, axis=None, kind="stable")[:n_cand]
    cands = [tuple(int(v) for v in np.unravel_index(f, dens.shape)) for f in flat]
    rects = list(start.witness.rects)
    mask = start.witness.mask.copy()
    best = start.value
    evaluated = 1
    for _ in range(rounds):
        step = None
        for c in cands:
            if c in rects:
                continue
            trial = mask | fam.rect_mask(*c)
            val = psys.ratio(E, trial)[0]
            evaluated += 1
            if val > best + 1e-15 and (step is None or val > step[0]):
                step = (val, c, trial)
        if step is None:
            break
        best, c, mask = step
        rects.append(c)
    return BmoProdEstimate(best, OmegaSet.from_rects(fam, rects), "greedy", evaluated)


# -- one-parameter BMO --------------------------------------------------------


def enlarged_atoms(I: DyadicCube, kappa: float, box: int) -> np.ndarray:
    """Atoms of the concentric kappa-fold cube, clipped to the box."""
    c = np.asarray(I.corner, dtype=float) + I.side / 2
    lo = np.maximum(np.ceil(c - kappa * I.side / 2), 0).astype(int)
    hi = np.minimum(np.ceil(c + kappa * I.side / 2), box).astype(int)
    if np.any(hi <= lo):
        return np.zeros(0, dtype=np.int64)
    mesh = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij")
    return np.ravel_multi_index(tuple(m.reshape(-1) for m in mesh), (box,) * I.dim)


def weighted_median(x, w):
    order = np.argsort(x, kind="stable")
    cw = np.cumsum(w[order])
    k = int(np.searchsorted(cw, cw[-1] / 2))
    return float(x[order][min(k, len(x) - 1)])


def bmo_norm(f, mu: AtomicMeasure, p: int, kappa: float, cubes) -> dict:
    """sup over cubes of min_c (int_I |f - c|^p / mu(kappa I))^(1/p)."""
    if p not in (1, 2):
        raise SpacesError("p must be 1 or 2")
    if kappa <= 1:
        raise SpacesError("kappa must exceed 1")
    f = np.asarray(f, dtype=float).reshape(-1)
    w = mu.flat.astype(float)
    best, arg, skipped = 0.0, None, 0
    for I in cubes:
        a = I.atoms(mu.side)
        if len(a) == 0:
            continue
        wa = w[a]
        mI = wa.sum()
        big = w[enlarged_atoms(I, kappa, mu.side)].sum()
        if big <= 0:
            skipped += 1
            continue
        if mI <= 0:
            continue
        fa = f[a]
        if p == 2:
            c = (fa * wa).sum() / mI
            val = np.sqrt((np.abs(fa - c) ** 2 * wa).sum() / big)
        else:
            c = weighted_median(fa[wa > 0], wa[wa > 0])
            val = (np.abs(fa - c) * wa).sum() / big
        if val > best:
            best, arg = float(val), I
    return {"value": best, "witness": arg, "skipped": skipped}


def lemma_bmo1_check(f, sys: FactorSystem, kappa: float = 2.0, cubes=None) -> dict:
    """Worst C in (sum_{good I in J, gap >= r} |<f,h_I>|^2)^1/2 <= C mu(J)^1/2 ||f||_BMO."""
    b = sys.basis
    coef = b.coefficients(f)
    # roundoff from constants would otherwise divide by a vanishing norm
    coef[np.abs(coef) <= 1e-12 * max(1.0, float(np.abs(f).max(initial=0)))] = 0
    other = sys.other
    if cubes is None:
        cubes = list(sys.grid.all_cubes) + list(other.all_cubes)
    norm = bmo_norm(f, sys.mu, 2, kappa, cubes)["value"]
    lhs = np.zeros(other.n_cubes_total)
    elig = np.nonzero(sys.good & (b.eta != 0) & b.nonzero)[0]
    for gJ in range(other.depth + 1):
        for i in elig:
            if b.gen[i] - sys.r >= gJ:
                lhs[sys.ancestor_at(int(i), gJ)] += coef[i] ** 2
    m = sys.other_masses
    worst, arg = 0.0, None
    for J in range(other.n_cubes_total):
        if lhs[J] <= 0:
            continue
        denom = np.sqrt(m[J]) * norm
        c = np.inf if denom <= 1e-300 else float(np.sqrt(lhs[J]) / denom)
        if c > worst:
            worst, arg = c, J
    return {"worst_C": worst, "witness_gid": arg, "bmo": norm}


# -- duality ------------------------------------------------------------------


@dataclass
class DualityReport:
    pairing: float
    s_norm_1: float
    L_tilde: float
    ratio: float
    chain: dict

    def to_dict(self):
        return {"pairing": self.pairing, "s_norm_1": self.s_norm_1, "L_tilde": self.L_tilde,
                "ratio": self.ratio, "chain": self.chain}


def h1_bmo_duality_check(b, C_f, psys: ProductSystem, tol: float = 1e-9) -> DualityReport:
    """Reproduce the level-set proof of |<b, f>| <= C L ||S f||_1.

    ``C_f`` holds the window coefficients of f.  Every intermediate inequality
    of the argument is checked; ``chain`` records the worst slack of each.
    """
    C_f = np.asarray(C_f, dtype=float) * psys.window
    Cb = psys.coefficients(b) * psys.window
    pairing = float((Cb * C_f).sum())
    fam = psys.family
    w = psys.weights()
    phi = psys.square_function(C=C_f)
    s1 = float((phi * w).sum())
    Eb = psys.energy(Cb)
    Ef = psys.energy(C_f)
    chain = {"cs_step": 0.0, "half_mass": 0.0, "square_sum": 0.0, "sup_bound": 0.0,
             "within_tilde": True, "levels": 0, "tilde_growth": 0.0}
    if not np.any(C_f):
        return DualityReport(abs(pairing), s1, 0.0, 0.0, chain)
    if s1 <= 0:
        raise SpacesError("square function vanishes but f has window coefficients")
    pos = phi[w > 0]
    pos = pos[pos > 0]
    k_lo = int(np.floor(np.log2(pos.min()))) - 1
    k_hi = int(np.floor(np.log2(pos.max())))
    mS = fam.rect_masses()
    active = Ef > 0
    rows = []
    for k in range(k_hi + 1, k_lo - 1, -1):
        om = phi > 2.0 ** k
        inter = fam.block_sums(om.astype(float))
        Sk = (2 * inter > mS) & (mS > 0)
        rows.append((k, om, Sk))
    rows.reverse()
    L_tilde = 0.0
    total = 0.0
    assigned = np.zeros_like(active)
    per_k = []
    for idx, (k, om, Sk) in enumerate(rows):
        S_next = rows[idx + 1][2] if idx + 1 < len(rows) else np.zeros_like(Sk)
        om_next = rows[idx + 1][1] if idx + 1 < len(rows) else phi > 2.0 ** (k + 1)
        layer = Sk & ~S_next & active
        assigned |= layer
        tilde = fam.tilde(om)
        inside = fam.contained(tilde)
        if np.any(layer & ~inside):
            chain["within_tilde"] = False
        m_tilde = float((w * tilde).sum())
        m_om = float((w * om).sum())
        if m_om > 0:
            chain["tilde_growth"] = max(chain["tilde_growth"], m_tilde / m_om)
        ratio_k = 0.0
        if m_tilde > 0:
            ratio_k = float(np.sqrt(Eb[inside].sum() / m_tilde))
        L_tilde = max(L_tilde, ratio_k)
        per_k.append((k, layer, om_next, tilde, m_tilde))
    for k, layer, om_next, tilde, m_tilde in per_k:
        if not layer.any():
            continue
        # the pairing restricted to this layer, and Cauchy-Schwarz
        sel1 = layer[psys.sys_1.parent[:, None].clip(0), psys.sys_2.parent[None, :].clip(0)]
        sel = sel1 & psys.window
        part = float(np.abs((Cb * C_f)[sel]).sum())
        eb, ef = float(Eb[layer].sum()), float(Ef[layer].sum())
        chain["cs_step"] = max(chain["cs_step"], part - np.sqrt(eb * ef) - tol * (1 + part))
        # 1 <= 2 mu(S minus Omega_{k+1}) / mu(S) for every S in the layer
        outside = fam.block_sums((~om_next).astype(float))
        lay_m = mS[layer]
        chain["half_mass"] = max(chain["half_mass"], float((lay_m - 2 * outside[layer]).max()))
        # sum |lambda|^2 <= 2 int_{tilde minus Omega_{k+1}} phi^2 <= 2 4^{k+1} mu(tilde)
        region = tilde & ~om_next
        rhs = 2 * float((phi ** 2 * w * region).sum())
        chain["square_sum"] = max(chain["square_sum"], ef - rhs - tol * (1 + ef))
        chain["sup_bound"] = max(chain["sup_bound"], rhs - 2 * 4.0 ** (k + 1) * m_tilde
                                 - tol * (1 + rhs))
        total += np.sqrt(eb) * np.sqrt(ef)
        chain["levels"] += 1
    if np.any(active & ~assigned):
        raise SpacesError("a rectangle with window coefficients has no level")
    chain["layer_sum"] = float(total)
    chain["layer_sum_bound"] = float(abs(pairing) - total)
    ratio = abs(pairing) / (L_tilde * s1) if L_tilde * s1 > 0 else 0.0
    return DualityReport(abs(pairing), s1, L_tilde, ratio, chain)
