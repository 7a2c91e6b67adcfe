import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyadic_t1.grid import (DyadicCube, GridError, PairClass, ShiftedDyadicGrid,
                            SurgeryResolutionError, bad_mask, badness_probability, classify_pair,
                            five_core_inside, gamma, i_bad_superset, is_bad, random_grid,
                            standard_grid, surgery, surgery_j, surgery_pair, wilson_interval)


def all_grids(depth, dim=1):
    for bits in itertools.product((0, 1), repeat=depth * dim):
        yield ShiftedDyadicGrid(dim, depth, np.array(bits).reshape(depth, dim))


def brute_bad(I, other, r, gam, const):
    """Direct quantification over every cube of ``other`` at least 2**r times larger."""
    for g2 in range(0, I.gen - r + 1):
        for I2 in other.cubes(g2):
            if I.dist_to_boundary(I2) <= const * I.side ** gam * I2.side ** (1 - gam):
                return True
    return False


@pytest.mark.parametrize("alpha, d, g", [(1, 1, 0.25), (1, 0, 0.5), (0.5, 1, 1 / 6)])
def test_gamma(alpha, d, g):
    assert gamma(alpha, d) == pytest.approx(g)


def test_gamma_rejects():
    with pytest.raises(GridError):
        gamma(0, 1)


def test_random_grid_reproducible_and_zero_shift():
    a, b = random_grid(1, 5, 8), random_grid(1, 5, 8)
    np.testing.assert_array_equal(a.shifts, b.shifts)
    z = ShiftedDyadicGrid(1, 8, np.zeros((8, 1)))
    s = standard_grid(1, 8)
    assert all(z.offset(g) == s.offset(g) == 0 for g in range(9))


def test_distinct_seeds_rarely_coincide():
    # identical shift sequences have probability 2**-8 per pair at depth 8
    n = 4000
    same = sum(np.array_equal(random_grid(1, 2 * i, 8).shifts, random_grid(1, 2 * i + 1, 8).shifts)
               for i in range(n))
    lo, hi = wilson_interval(same, n, alpha=0.001)
    assert lo <= 2 ** -8 <= hi


def test_grid_round_trip():
    g = random_grid(2, 9, 5)
    back = ShiftedDyadicGrid.from_dict(g.to_dict())
    np.testing.assert_array_equal(back.shifts, g.shifts)


def test_bad_shift_rejected():
    with pytest.raises(GridError):
        ShiftedDyadicGrid(1, 2, [[0], [2]])


@pytest.mark.parametrize("dim, depth, seed", [(1, 8, 1), (1, 8, 2), (2, 5, 3)])
def test_tiling_and_parents(dim, depth, seed):
    g = random_grid(dim, seed, depth)
    for gen in range(depth + 1):
        lab = g.labels(gen)
        assert lab.shape == (g.n_atoms,)
        for k, cube in enumerate(g.cubes(gen)):
            atoms = cube.atoms(g.box)
            assert np.all(lab[atoms] == k)
            assert len(atoms) > 0
        if gen < depth:
            for cube in g.cubes(gen):
                kids = cube.children()
                assert len(kids) == 2 ** dim
                for ch in kids:
                    assert g.is_member(ch)
                    assert g.parent(ch) == cube
                    assert g.ancestor(ch, gen) == cube


def test_is_bad_touching_boundary():
    I = DyadicCube(5, (0,), 8)
    assert is_bad(I, standard_grid(1, 8), 2, 0.25)


def test_is_bad_vacuous_when_r_too_large():
    I = DyadicCube(3, (0,), 32)
    assert not is_bad(I, standard_grid(1, 8), 4, 0.25)


def test_good_cube_deep_inside():
    # a unit cube at the centre of [0, 512): a quarter of the box from every
    # generation-0 and generation-1 boundary
    depth = 10
    other = standard_grid(1, depth)
    I = DyadicCube(depth, (256,), 1)
    assert not is_bad(I, other, depth - 1, 0.25, const=0.5)
    assert not brute_bad(I, other, depth - 1, 0.25, 0.5)
    # with the constant 4 the lattice is too coarse for anything to be good
    assert is_bad(I, other, depth - 1, 0.25, const=4.0)


def test_is_bad_rejects_gamma():
    with pytest.raises(GridError):
        is_bad(DyadicCube(4, (0,), 16), standard_grid(1, 8), 1, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 5), st.sampled_from([0.125, 0.5, 4.0]),
       st.floats(0.1, 0.9))
def test_bad_mask_matches_definition(seed, r, const, gam):
    D, other = random_grid(1, seed, 7), random_grid(1, seed + 1, 7)
    cubes = D.all_cubes
    gens = [c.gen for c in cubes]
    corners = [c.corner for c in cubes]
    fast = bad_mask(gens, corners, other, r, gam, const)
    slow = [brute_bad(c, other, r, gam, const) for c in cubes]
    np.testing.assert_array_equal(fast, slow)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 4))
def test_badness_monotone_in_constant(seed, r):
    D, other = random_grid(1, seed, 8), random_grid(1, seed + 1, 8)
    cubes = D.all_cubes
    gens, corners = [c.gen for c in cubes], [c.corner for c in cubes]
    masks = [bad_mask(gens, corners, other, r, 0.25, c) for c in (0.05, 0.125, 0.5, 4.0)]
    for a, b in zip(masks, masks[1:]):
        assert np.all(a <= b)


def test_badness_probability_against_exact_enumeration():
    # every one of the 256 shift sequences at depth 8 is equally likely
    grids = list(all_grids(8))
    for r in (1, 3, 5):
        exact = np.mean([bad_mask([8], [(0,)], g, r, 0.25, 0.125)[0] for g in grids])
        est = badness_probability(8, r, 0.25, 4000, seed=r, depth=8, const=0.125)
        lo, hi = wilson_interval(est.bad, est.trials, alpha=0.001)
        assert lo <= exact <= hi


def test_badness_single_trial():
    est = badness_probability(8, 2, 0.25, 1, seed=0, const=0.125)
    assert est.p in (0.0, 1.0)


def test_badness_curve_decreases():
    ests = [badness_probability(8, r, 0.25, 3000, seed=11, const=0.125) for r in range(1, 7)]
    for a, b in zip(ests, ests[2:]):
        assert b.lo <= a.hi
    assert ests[-1].p < 0.3


def test_badness_rejects():
    with pytest.raises(GridError):
        badness_probability(9, 1, 0.25, 10, depth=8)
    with pytest.raises(GridError):
        badness_probability(4, 1, 0.25, 0)


def test_classify_pair():
    I = DyadicCube(4, (16,), 16)
    assert classify_pair(I, I, 2, 0.25) is PairClass.ADJACENT
    far = DyadicCube(4, (224,), 16)
    assert classify_pair(I, far, 2, 0.25) is PairClass.SEPARATED
    with pytest.raises(GridError):
        classify_pair(DyadicCube(0, (0,), 256), I, 2, 0.25)


def test_nested_pair_has_deep_child():
    depth = 20
    I2 = DyadicCube(0, (0,), 2 ** depth)
    I1 = DyadicCube(depth, (2 ** 18,), 1)
    assert classify_pair(I1, I2, 3, 0.25) is PairClass.NESTED
    ch = next(c for c in I2.children() if c.contains(I1))
    comp_dist = min(I1.corner[0] - ch.corner[0], ch.corner[0] + ch.side - I1.corner[0] - 1)
    assert comp_dist > 4 * I1.side ** 0.25 * ch.side ** 0.75


def test_out_of_scope_pair():
    I2 = DyadicCube(0, (0,), 256)
    I1 = DyadicCube(6, (-2,), 4)
    assert classify_pair(I1, I2, 2, 0.25) is PairClass.OUT_OF_SCOPE


def test_surgery_j():
    assert surgery_j(Fraction(1, 8)) == -24
    assert surgery_j(Fraction(1, 8), 21) == -3
    with pytest.raises(GridError):
        surgery_j(Fraction(3, 2))
    with pytest.raises(SurgeryResolutionError):
        surgery_j(Fraction(1, 8), 0, side1=256)


@given(st.fractions(min_value=Fraction(1, 1000), max_value=Fraction(999, 1000)), st.integers(0, 25))
def test_surgery_j_window(theta, offset):
    j = surgery_j(theta, offset)
    assert Fraction(2) ** (-21 + offset) * theta <= Fraction(2) ** j < Fraction(2) ** (-20 + offset) * theta


def _dist_closed_to_boundary(a, b, c, d):
    """1D distance from [a, b] to the boundary points {c, d} of [c, d]."""
    if b < c or a > d:
        return max(c - b, a - d)
    if c < a and b < d:
        return min(a - c, d - b)
    return 0


def oracle_surgery(I1, I2, theta, aux, gen_g):
    th = Fraction(theta)
    sg = aux.side(gen_g)
    off = int(aux.offset(gen_g)[0])
    sep, bnd, delta = [], [], []
    for x in range(max(I1.corner[0], 0), min(I1.corner[0] + I1.side, aux.box)):
        glo = (x - off) // sg * sg + off
        in2 = I2.corner[0] <= x < I2.corner[0] + I2.side
        near2 = _dist_closed_to_boundary(glo, glo + sg, I2.corner[0], I2.corner[0] + I2.side) \
            < th * I2.side / 2
        nearg = in2 and min(x - glo, glo + sg - x) < th * sg
        if near2 or nearg:
            bnd.append(x)
        elif in2:
            delta.append(x)
        else:
            sep.append(x)
    return sep, bnd, delta


def _draw_pair(rng, depth=8, max_gen=3):
    D, Dp, aux = (random_grid(1, int(rng.integers(2 ** 31)), depth) for _ in range(3))
    g1 = int(rng.integers(0, max_gen + 1))
    g2 = int(rng.integers(0, g1 + 1))
    I1 = D.cubes(g1)[int(rng.integers(D.n_cubes(g1)))]
    pt = np.clip(I1.lo + rng.integers(-I1.side, 2 * I1.side, size=1), 0, D.box - 1)
    return I1, Dp.cube_of(pt, g2), Dp, aux


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([Fraction(1, 4), Fraction(1, 8), Fraction(1, 3)]))
def test_surgery_matches_oracle(seed, theta):
    rng = np.random.default_rng(seed)
    I1, I2, Dp, aux = _draw_pair(rng)
    try:
        part = surgery(I1, I2, theta, aux, offset=18)
    except SurgeryResolutionError:
        return
    sep, bnd, delta = oracle_surgery(I1, I2, theta, aux, part.aux_gen)
    np.testing.assert_array_equal(np.sort(part.sep), sep)
    np.testing.assert_array_equal(np.sort(part.boundary), bnd)
    np.testing.assert_array_equal(part.delta, delta)
    for atoms, full, cube in part.delta_pieces:
        assert np.all(np.isin(atoms, I2.atoms(aux.box)))
        assert np.all(np.isin(atoms, I1.atoms(aux.box)))
        if full:
            k = np.arange(cube.corner[0], cube.corner[0] + cube.side)
            core = k[np.minimum(k - cube.corner[0], cube.corner[0] + cube.side - k) >= theta * cube.side]
            np.testing.assert_array_equal(atoms, core)
    p1, p2, common = surgery_pair(I1, I2, theta, aux, offset=18)
    assert all(five_core_inside(g, theta, I1, I2) for g in common)
    bad = i_bad_superset(I1, theta, Dp, aux, 2, offset=18)
    if I2.side <= 4 * I1.side:
        assert np.all(np.isin(part.boundary, bad))


def test_surgery_disjoint_and_equal():
    aux = random_grid(1, 3, 8)
    I1, I2 = DyadicCube(2, (0,), 64), DyadicCube(2, (128,), 64)
    part = surgery(I1, I2, Fraction(1, 4), aux, offset=18)
    assert len(part.delta) == 0
    assert len(part.sep) + len(part.boundary) == 64
    same = surgery(I1, I1, Fraction(1, 4), aux, offset=18)
    assert len(same.sep) == 0


def test_surgery_resolution_error():
    with pytest.raises(SurgeryResolutionError):
        surgery(DyadicCube(6, (0,), 4), DyadicCube(6, (0,), 4), Fraction(1, 4), random_grid(1, 0, 8))


def test_tiny_theta_leaves_only_boundary_atoms():
    # lattice points on a cube boundary are at distance 0 from it for every theta
    I1 = DyadicCube(1, (0,), 128)
    other, aux = random_grid(1, 4, 8), random_grid(1, 5, 8)
    bad = i_bad_superset(I1, Fraction(1, 2 ** 10), other, aux, 2, offset=25)
    aux_gen = I1.gen - surgery_j(Fraction(1, 2 ** 10), 25)
    ends = set()
    for grid, k in [(other, 0), (other, 1), (aux, aux_gen)]:
        s, off = grid.side(k), int(grid.offset(k)[0])
        ends |= {x for x in range(128) if (x - off) % s == 0}
    assert set(bad.tolist()) <= ends


def test_bad_ratio_shrinks_with_theta():
    rng = np.random.default_rng(9)
    full = half = 0
    for _ in range(80):
        I1, I2, Dp, aux = _draw_pair(rng, max_gen=2)
        full += len(i_bad_superset(I1, Fraction(1, 4), Dp, aux, 2, offset=18)) / I1.side
        half += len(i_bad_superset(I1, Fraction(1, 8), Dp, aux, 2, offset=18)) / I1.side
    assert half < full
