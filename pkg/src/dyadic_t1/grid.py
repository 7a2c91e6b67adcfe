"""Shifted dyadic grids, cube geometry, goodness and the surgery partition.

All coordinates are integer lattice units.  A grid of depth ``depth`` lives on
the box [0, 2**depth)**dim of lattice points; generation g cubes have side
2**(depth - g), so generation 0 is the scale of the whole box and generation
``depth`` cubes hold one atom each.  The shift bit vector w_i (i = 1..depth)
moves every cube of side > 2**(depth - i) by 2**(depth - i) * w_i.
"""
from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np

BAD_CONST = 4.0
SEP_CONST = 2.0
SURGERY_WINDOW = (-21, -20)
DEFAULT_SURGERY_OFFSET = 18


class GridError(ValueError):
    pass


class SurgeryResolutionError(GridError):
    pass


def gamma(alpha: float, d_lam: float) -> float:
    """Goodness exponent alpha / (2 d_lambda + 2 alpha)."""
    if alpha <= 0 or d_lam < 0:
        raise GridError("need alpha > 0 and d_lambda >= 0")
    return alpha / (2 * d_lam + 2 * alpha)


@dataclass(frozen=True)
class DyadicCube:
    """Half-open cube [corner, corner + side) in lattice units."""

    gen: int
    corner: tuple
    side: int

    @property
    def dim(self) -> int:
        return len(self.corner)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.corner, dtype=np.int64)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.side

    def children(self) -> list["DyadicCube"]:
        """The 2**dim halves in lexicographic corner order."""
        h = self.side // 2
        if h == 0:
            raise GridError("atom-scale cube has no children")
        out = []
        for bits in itertools.product((0, 1), repeat=self.dim):
            c = tuple(int(a + b * h) for a, b in zip(self.corner, bits))
            out.append(DyadicCube(self.gen + 1, c, h))
        return out

    def contains(self, other: "DyadicCube") -> bool:
        return bool(np.all(self.lo <= other.lo) and np.all(other.hi <= self.hi))

    def intersects(self, other: "DyadicCube") -> bool:
        return bool(np.all(self.lo < other.hi) and np.all(other.lo < self.hi))

    def contains_points(self, pts: np.ndarray) -> np.ndarray:
        return np.all((pts >= self.lo) & (pts < self.hi), axis=-1)

    def dist(self, other: "DyadicCube") -> int:
        """Closed-set l-infinity distance."""
        return box_dist(self.lo, self.hi, other.lo, other.hi)

    def dist_to_boundary(self, other: "DyadicCube"):
        """Distance from this (closed) cube to the boundary of ``other``."""
        return box_dist_to_boundary(self.lo, self.hi, other.lo, other.hi)

    def atoms(self, side: int) -> np.ndarray:
        """Flat indices of the lattice points of [0, side)**dim inside the cube."""
        lo = np.maximum(self.lo, 0)
        hi = np.minimum(self.hi, side)
        if np.any(hi <= lo):
            return np.zeros(0, dtype=np.int64)
        ranges = [np.arange(a, b) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*ranges, indexing="ij")
        return np.ravel_multi_index(tuple(m.reshape(-1) for m in mesh), (side,) * self.dim)

    def to_dict(self) -> dict:
        return {"gen": self.gen, "corner": list(self.corner), "side": self.side}


def box_dist(alo, ahi, blo, bhi):
    gaps = np.maximum(0, np.maximum(np.asarray(blo) - ahi, np.asarray(alo) - bhi))
    return gaps.max()


def box_dist_to_boundary(alo, ahi, blo, bhi):
    """d(A, boundary of B) for closed boxes A = [alo, ahi], B = [blo, bhi]."""
    alo, ahi, blo, bhi = (np.asarray(v) for v in (alo, ahi, blo, bhi))
    if np.any(alo > bhi) or np.any(blo > ahi):
        return box_dist(alo, ahi, blo, bhi)
    if np.all(blo < alo) and np.all(ahi < bhi):
        return min((alo - blo).min(), (bhi - ahi).min())
    return 0


class ShiftedDyadicGrid:
    """Dyadic grid on [0, 2**depth)**dim translated by binary shifts.

    ``shifts[i - 1]`` is the bit vector w_i.  Cubes are enumerated per
    generation over those meeting the box; ``labels(g)`` maps every atom to
    the local index of its generation-g cube and global ids are assigned
    generation by generation.
    """

    def __init__(self, dim: int, depth: int, shifts=None, seed=None):
        if depth < 0:
            raise GridError("depth must be nonnegative")
        self.dim = dim
        self.depth = depth
        if shifts is None:
            shifts = np.zeros((depth, dim), dtype=np.int64)
        shifts = np.asarray(shifts, dtype=np.int64).reshape(depth, dim)
        if np.any((shifts != 0) & (shifts != 1)):
            raise GridError("shift components must be 0 or 1")
        shifts.setflags(write=False)
        self.shifts = shifts
        self.seed = seed
        self.box = 2 ** depth
        weights = 2 ** (depth - np.arange(1, depth + 1))
        offs = np.zeros((depth + 1, dim), dtype=np.int64)
        for g in range(depth - 1, -1, -1):
            offs[g] = offs[g + 1] + weights[g] * shifts[g]
        offs.setflags(write=False)
        self._offsets = offs

    # -- basic geometry
    def side(self, gen: int) -> int:
        return 2 ** (self.depth - gen)

    def offset(self, gen: int) -> np.ndarray:
        return self._offsets[gen]

    @property
    def n_atoms(self) -> int:
        return self.box ** self.dim

    @cached_property
    def points(self) -> np.ndarray:
        return np.indices((self.box,) * self.dim).reshape(self.dim, -1).T.copy()

    def index_of(self, pts, gen: int) -> np.ndarray:
        """Integer cube index (per axis) of the generation-gen cube holding pts."""
        return np.floor_divide(np.asarray(pts) - self.offset(gen), self.side(gen))

    def cube_at(self, index, gen: int) -> DyadicCube:
        c = np.asarray(index) * self.side(gen) + self.offset(gen)
        return DyadicCube(gen, tuple(int(v) for v in c), self.side(gen))

    def cube_of(self, pt, gen: int) -> DyadicCube:
        return self.cube_at(self.index_of(np.asarray(pt), gen), gen)

    def is_member(self, cube: DyadicCube) -> bool:
        s = self.side(cube.gen)
        return cube.side == s and bool(np.all((cube.lo - self.offset(cube.gen)) % s == 0))

    def parent(self, cube: DyadicCube) -> DyadicCube:
        if cube.gen == 0:
            raise GridError("top-generation cube has no parent")
        return self.cube_of(cube.lo, cube.gen - 1)

    def ancestor(self, cube: DyadicCube, gen: int) -> DyadicCube:
        if gen > cube.gen:
            raise GridError("ancestor generation must be coarser")
        return self.cube_of(cube.lo, gen)

    # -- enumeration
    @cached_property
    def _tables(self):
        amin, counts, labels, starts = [], [], [], [0]
        for g in range(self.depth + 1):
            s, t = self.side(g), self.offset(g)
            lo = np.floor_divide(-t, s)
            hi = np.floor_divide(self.box - 1 - t, s)
            n = hi - lo + 1
            idx = self.index_of(self.points, g) - lo
            lab = np.ravel_multi_index(tuple(idx.T), tuple(n)).astype(np.int64)
            amin.append(lo)
            counts.append(n)
            labels.append(lab)
            starts.append(starts[-1] + int(np.prod(n)))
        return amin, counts, labels, starts

    def n_cubes(self, gen: int) -> int:
        return int(np.prod(self._tables[1][gen]))

    @property
    def n_cubes_total(self) -> int:
        return self._tables[3][-1]

    def gid_start(self, gen: int) -> int:
        return self._tables[3][gen]

    def labels(self, gen: int) -> np.ndarray:
        return self._tables[2][gen]

    def global_labels(self, gen: int) -> np.ndarray:
        return self.labels(gen) + self.gid_start(gen)

    def cube_local_index(self, cube: DyadicCube) -> int:
        """Local index within its generation, or -1 if the cube misses the box."""
        if not self.is_member(cube):
            raise GridError("cube does not belong to this grid")
        amin, counts = self._tables[0][cube.gen], self._tables[1][cube.gen]
        idx = self.index_of(cube.lo, cube.gen) - amin
        if np.any(idx < 0) or np.any(idx >= counts):
            return -1
        return int(np.ravel_multi_index(tuple(idx), tuple(counts)))

    def gid(self, cube: DyadicCube) -> int:
        loc = self.cube_local_index(cube)
        return -1 if loc < 0 else loc + self.gid_start(cube.gen)

    def cubes(self, gen: int) -> list[DyadicCube]:
        amin, counts = self._tables[0][gen], self._tables[1][gen]
        out = []
        for idx in np.ndindex(*counts):
            out.append(self.cube_at(np.asarray(idx) + amin, gen))
        return out

    @cached_property
    def all_cubes(self) -> list[DyadicCube]:
        return [c for g in range(self.depth + 1) for c in self.cubes(g)]

    @cached_property
    def cube_gens(self) -> np.ndarray:
        return np.concatenate([np.full(self.n_cubes(g), g) for g in range(self.depth + 1)])

    @cached_property
    def cube_corners(self) -> np.ndarray:
        rows = []
        for g in range(self.depth + 1):
            amin, counts = self._tables[0][g], self._tables[1][g]
            idx = np.indices(tuple(counts)).reshape(self.dim, -1).T + amin
            rows.append(idx * self.side(g) + self.offset(g))
        return np.concatenate(rows).astype(np.int64)

    @cached_property
    def cube_sides(self) -> np.ndarray:
        return 2 ** (self.depth - self.cube_gens)

    @cached_property
    def parent_gid(self) -> np.ndarray:
        """Global id of the parent of every cube (-1 at generation 0)."""
        out = np.full(self.n_cubes_total, -1, dtype=np.int64)
        for g in range(1, self.depth + 1):
            s0 = self.gid_start(g)
            child = self.labels(g)
            par = self.global_labels(g - 1)
            out[s0 + child] = par
        return out

    @cached_property
    def atom_counts(self) -> np.ndarray:
        return np.concatenate([np.bincount(self.labels(g), minlength=self.n_cubes(g))
                               for g in range(self.depth + 1)])

    def cube_masses(self, weights: np.ndarray) -> np.ndarray:
        """Masses of all cubes (global order) for flat atom weights."""
        w = np.asarray(weights).reshape(-1)
        return np.concatenate([np.bincount(self.labels(g), weights=w, minlength=self.n_cubes(g))
                               for g in range(self.depth + 1)])

    def indicator_matrix(self) -> np.ndarray:
        """Dense (n_cubes_total, n_atoms) 0/1 matrix."""
        Z = np.zeros((self.n_cubes_total, self.n_atoms))
        cols = np.arange(self.n_atoms)
        for g in range(self.depth + 1):
            Z[self.global_labels(g), cols] = 1.0
        return Z

    # -- serialization
    def to_dict(self) -> dict:
        return {"dim": self.dim, "depth": self.depth, "seed": self.seed,
                "shifts": self.shifts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftedDyadicGrid":
        return cls(int(d["dim"]), int(d["depth"]), np.asarray(d["shifts"]), d.get("seed"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def __repr__(self):
        return f"ShiftedDyadicGrid(dim={self.dim}, depth={self.depth}, seed={self.seed})"


def standard_grid(dim: int = 1, depth: int = 8) -> ShiftedDyadicGrid:
    return ShiftedDyadicGrid(dim, depth)


def random_grid(dim: int = 1, seed=None, depth: int = 8) -> ShiftedDyadicGrid:
    rng = np.random.default_rng(seed)
    return ShiftedDyadicGrid(dim, depth, rng.integers(0, 2, size=(depth, dim)), seed=seed)


# -- goodness -----------------------------------------------------------------


def _line_gap(lo, side1, offset, side2):
    """Closed-interval distance from [lo, lo + side1] to the lines offset + k*side2."""
    u = np.mod(lo - offset, side2)
    up = side2 - u - side1
    return np.where((u == 0) | (up <= 0), 0, np.minimum(u, up))


def bad_mask(gens, corners, other: ShiftedDyadicGrid, r: int, gam: float,
             const: float = BAD_CONST) -> np.ndarray:
    """Vectorized badness of cubes (gens, corners) with respect to ``other``.

    Coarser cubes are quantified only over generations 0..gen - r of
    ``other`` (the represented scales).
    """
    if not 0 < gam < 1:
        raise GridError("gamma must lie in (0, 1)")
    if r < 1:
        raise GridError("r must be >= 1")
    gens = np.asarray(gens, dtype=np.int64)
    corners = np.asarray(corners, dtype=np.int64).reshape(len(gens), -1)
    side1 = 2 ** (other.depth - gens)
    bad = np.zeros(len(gens), dtype=bool)
    for g2 in range(0, other.depth + 1):
        active = gens - r >= g2
        if not active.any():
            continue
        s2 = other.side(g2)
        thr = const * side1.astype(float) ** gam * float(s2) ** (1 - gam)
        gap = _line_gap(corners, side1[:, None], other.offset(g2)[None, :], s2).min(axis=1)
        bad |= active & (gap <= thr)
    return bad


def is_bad(I: DyadicCube, other: ShiftedDyadicGrid, r: int, gam: float,
           const: float = BAD_CONST) -> bool:
    return bool(bad_mask([I.gen], [I.corner], other, r, gam, const)[0])


@dataclass
class BadnessEstimate:
    p: float
    lo: float
    hi: float
    trials: int
    bad: int


def wilson_interval(count: int, n: int, alpha: float = 0.05):
    from statsmodels.stats.proportion import proportion_confint
    lo, hi = proportion_confint(count, n, alpha=alpha, method="wilson")
    return float(lo), float(hi)


def badness_probability(gen: int, r: int, gam: float, trials: int, seed=None,
                        depth: int = 8, dim: int = 1, const: float = BAD_CONST,
                        corner=None) -> BadnessEstimate:
    """Monte Carlo P(fixed generation-gen cube is bad for a random grid).

    Draws ``trials`` independent shift sequences from one seed, so calls with
    the same seed and different r reuse the same grids.
    """
    if trials < 1:
        raise GridError("trials must be >= 1")
    if gen > depth:
        raise GridError("gen exceeds grid depth")
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(trials, depth, dim))
    corner = np.zeros(dim, dtype=np.int64) if corner is None else np.asarray(corner)
    side1 = 2 ** (depth - gen)
    w = 2 ** (depth - np.arange(1, depth + 1))
    bad = np.zeros(trials, dtype=bool)
    for g2 in range(0, gen - r + 1):
        s2 = 2 ** (depth - g2)
        off = np.einsum("tid,i->td", bits[:, g2:, :], w[g2:])
        thr = const * float(side1) ** gam * float(s2) ** (1 - gam)
        gap = _line_gap(corner[None, :], side1, off, s2).min(axis=1)
        bad |= gap <= thr
    k = int(bad.sum())
    lo, hi = wilson_interval(k, trials)
    return BadnessEstimate(k / trials, lo, hi, trials, k)


class PairClass(enum.Enum):
    SEPARATED = "separated"
    ADJACENT = "adjacent"
    NESTED = "nested"
    OUT_OF_SCOPE = "out_of_scope"


def classify_pair(I1: DyadicCube, I2: DyadicCube, r: int, gam: float,
                  const: float = SEP_CONST) -> PairClass:
    """Separated / nested / adjacent split of a pair with side(I1) <= side(I2).

    A size-nested pair whose small cube is not inside the big one (possible
    only for bad cubes) is out of scope.
    """
    if I1.side > I2.side:
        raise GridError("need side(I1) <= side(I2)")
    d = I1.dist(I2)
    if d > const * float(I1.side) ** gam * float(I2.side) ** (1 - gam):
        return PairClass.SEPARATED
    if I1.side * 2 ** r < I2.side:
        return PairClass.NESTED if I2.contains(I1) else PairClass.OUT_OF_SCOPE
    return PairClass.ADJACENT


def nested_child(I1: DyadicCube, I2: DyadicCube):
    """The child of I2 containing I1, or None."""
    for ch in I2.children():
        if ch.contains(I1):
            return ch
    return None


# -- surgery ------------------------------------------------------------------


def surgery_j(theta, offset: int = 0, side1: int | None = None) -> int:
    """The integer j with 2**(-21+offset) theta <= 2**j < 2**(-20+offset) theta.

    With ``side1`` (the lattice side of the small cube) the aux scale
    2**j * side1 must be at least one lattice unit.
    """
    th = Fraction(theta)
    if not 0 < th < 1:
        raise GridError("theta must lie in (0, 1)")
    lo_exp = SURGERY_WINDOW[0] + offset
    j = math.floor(math.log2(th)) + lo_exp - 1
    while Fraction(2) ** j < th * Fraction(2) ** lo_exp:
        j += 1
    while Fraction(2) ** j >= th * Fraction(2) ** (lo_exp + 1):
        j -= 1
    if side1 is not None and Fraction(2) ** j * side1 < 1:
        raise SurgeryResolutionError(
            f"aux scale 2**{j} * {side1} is below the lattice spacing; raise the offset")
    return j


@dataclass
class SurgeryPartition:
    sep: np.ndarray
    boundary: np.ndarray
    delta_pieces: list = field(default_factory=list)  # (atoms, is_full_cube, aux cube)
    theta: Fraction = Fraction(0)
    aux_gen: int = 0
    offset: int = DEFAULT_SURGERY_OFFSET

    @property
    def delta(self) -> np.ndarray:
        if not self.delta_pieces:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate([p[0] for p in self.delta_pieces]))


def _aux_gen(I1: DyadicCube, theta, aux: ShiftedDyadicGrid, offset: int) -> int:
    j = surgery_j(theta, offset, I1.side)
    g = I1.gen - j
    if g > aux.depth:
        raise SurgeryResolutionError("aux generation beyond grid depth")
    return g


def _core(g: DyadicCube, theta: Fraction):
    """Lattice points x of g with d(x, boundary of g) >= theta * side(g)."""
    t = theta * g.side
    lo = [math.ceil(a + t) for a in g.corner]
    hi = [math.floor(a + g.side - t) for a in g.corner]
    return lo, hi


def _partition(A: DyadicCube, B: DyadicCube, theta: Fraction, aux: ShiftedDyadicGrid,
               gen_g: int) -> SurgeryPartition:
    box = aux.box
    atoms = A.atoms(box)
    pts = np.stack(np.unravel_index(atoms, (box,) * A.dim), axis=-1) if len(atoms) else \
        np.zeros((0, A.dim), dtype=np.int64)
    in_B = B.contains_points(pts)
    idx = aux.index_of(pts, gen_g)
    sg = aux.side(gen_g)
    glo = idx * sg + aux.offset(gen_g)
    tb = theta * B.side / 2
    tg = theta * sg
    boundary = np.zeros(len(atoms), dtype=bool)
    dist_x = np.minimum(pts - glo, glo + sg - pts).min(axis=1) if len(atoms) else np.zeros(0)
    cache = {}
    for k in range(len(atoms)):
        key = tuple(glo[k])
        if key not in cache:
            cache[key] = box_dist_to_boundary(glo[k], glo[k] + sg, B.lo, B.hi)
        near_B = Fraction(int(cache[key])) < tb
        near_g = bool(in_B[k]) and Fraction(int(dist_x[k])) < tg
        boundary[k] = near_B or near_g
    sep = ~boundary & ~in_B
    delta = ~boundary & in_B
    pieces = []
    if delta.any():
        keys = [tuple(v) for v in glo[delta]]
        groups: dict = {}
        for a, key in zip(atoms[delta], keys):
            groups.setdefault(key, []).append(a)
        for key in sorted(groups):
            g = DyadicCube(gen_g, tuple(int(v) for v in key), sg)
            lo, hi = _core(g, theta)
            core_count = int(np.prod([max(0, b - a + 1) for a, b in zip(lo, hi)]))
            members = np.array(sorted(groups[key]), dtype=np.int64)
            pieces.append((members, len(members) == core_count, g))
    return SurgeryPartition(atoms[sep], atoms[boundary], pieces, theta, gen_g)


def surgery(I1: DyadicCube, I2: DyadicCube, theta, aux: ShiftedDyadicGrid,
            offset: int = DEFAULT_SURGERY_OFFSET) -> SurgeryPartition:
    """Split I1 into separated, boundary and interior parts relative to I2."""
    if I1.side > I2.side:
        raise GridError("need side(I1) <= side(I2)")
    th = Fraction(theta)
    g = _aux_gen(I1, th, aux, offset)
    part = _partition(I1, I2, th, aux, g)
    part.offset = offset
    return part


def surgery_pair(I1: DyadicCube, I2: DyadicCube, theta, aux: ShiftedDyadicGrid,
                 offset: int = DEFAULT_SURGERY_OFFSET):
    """Partitions of I1 and of I2 (same aux scale) and their common full pieces."""
    th = Fraction(theta)
    g = _aux_gen(I1, th, aux, offset)
    p1 = _partition(I1, I2, th, aux, g)
    p2 = _partition(I2, I1, th, aux, g)
    full2 = {piece[2].corner: piece for piece in p2.delta_pieces if piece[1]}
    common = []
    for atoms, full, cube in p1.delta_pieces:
        other = full2.get(cube.corner)
        if full and other is not None and np.array_equal(atoms, other[0]):
            common.append(cube)
    return p1, p2, common


def five_core_inside(g: DyadicCube, theta, I1: DyadicCube, I2: DyadicCube) -> bool:
    """Is 5L inside I1 and I2, L the theta-core of g (exact rationals)?"""
    th = Fraction(theta)
    half = Fraction(g.side) * (1 - 2 * th) * 5 / 2
    for j in range(g.dim):
        c = Fraction(g.corner[j]) + Fraction(g.side, 2)
        lo, hi = c - half, c + half
        for cube in (I1, I2):
            if lo < cube.corner[j] or hi >= cube.corner[j] + cube.side:
                return False
    return True


def i_bad_superset(I1: DyadicCube, theta, other: ShiftedDyadicGrid, aux: ShiftedDyadicGrid,
                   r: int, offset: int = DEFAULT_SURGERY_OFFSET) -> np.ndarray:
    """Atoms of I1 within theta*side of a boundary of a comparable cube of
    ``other`` (sides side(I1) .. 2**r side(I1)) or of an aux cube."""
    th = Fraction(theta)
    g = _aux_gen(I1, th, aux, offset)
    box = aux.box
    atoms = I1.atoms(box)
    if len(atoms) == 0:
        return atoms
    pts = np.stack(np.unravel_index(atoms, (box,) * I1.dim), axis=-1)
    hit = np.zeros(len(atoms), dtype=bool)
    levels = [(other, k) for k in range(max(0, I1.gen - r), I1.gen + 1)] + [(aux, g)]
    for grid, k in levels:
        s = grid.side(k)
        u = np.mod(pts - grid.offset(k), s)
        d = np.minimum(u, s - u).min(axis=1)
        # d < theta * s, compared exactly: d * den < num * s
        hit |= d * th.denominator < th.numerator * s
    return atoms[hit]
