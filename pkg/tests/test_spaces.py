import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyadic_t1 import desk
from dyadic_t1.grid import DyadicCube, random_grid, standard_grid
from dyadic_t1.haar import build_haar
from dyadic_t1.measure import generate_measure
from dyadic_t1.spaces import (OmegaSet, RectangleFamily, SpacesError, bmo_norm, bmo_prod_estimate,
                              enlarged_atoms, h1_bmo_duality_check, lemma_bmo1_check,
                              one_param_maximal, strong_maximal, weighted_median)


def small_psys(seed, N=5, kinds=("random_iid", "cantor_like")):
    rng = np.random.default_rng(seed)
    mu1 = desk.measure(kinds[0], int(rng.integers(2 ** 31)), N)
    mu2 = desk.measure(kinds[1], int(rng.integers(2 ** 31)), N)
    return desk.product_system(mu1, mu2, int(rng.integers(2 ** 31)))


def family(seed, N=3):
    rng = np.random.default_rng(seed)
    mu1 = generate_measure("random_int", int(rng.integers(99)), N, zero_prob=0.3)
    mu2 = generate_measure("random_iid", int(rng.integers(99)), N, zero_prob=0.3)
    return RectangleFamily(random_grid(1, int(rng.integers(99)), N),
                           random_grid(1, int(rng.integers(99)), N), mu1, mu2)


def brute_maximal(u, fam):
    w = fam.weights()
    out = np.zeros(fam.shape)
    for K in fam.grid_1.all_cubes:
        for L in fam.grid_2.all_cubes:
            a, b = K.atoms(fam.grid_1.box), L.atoms(fam.grid_2.box)
            m = w[np.ix_(a, b)].sum()
            if m > 0:
                avg = (np.abs(u[np.ix_(a, b)]) * w[np.ix_(a, b)]).sum() / m
                out[np.ix_(a, b)] = np.maximum(out[np.ix_(a, b)], avg)
    return out


# -- one-parameter BMO


def test_bmo_constant_is_zero():
    mu = generate_measure("random_iid", 1, N=4)
    cubes = standard_grid(1, 4).all_cubes
    assert bmo_norm(np.full(16, 3.0), mu, 2, 2.0, cubes)["value"] < 1e-14
    assert bmo_norm(np.full(16, 3.0), mu, 1, 2.0, cubes)["value"] < 1e-14


def test_bmo_of_haar_function():
    mu = generate_measure("uniform", N=4)
    I = DyadicCube(2, (4,), 4)
    h = build_haar(I, mu)[1].evaluate(16)
    # int |h|^2 = 1 and the doubled cube [2, 10) has mass 1/2
    val = bmo_norm(h, mu, 2, 2.0, [I])["value"]
    assert val == pytest.approx(np.sqrt(2))
    cs = np.linspace(-3, 3, 6001)
    w = mu.flat
    a = I.atoms(16)
    brute = min(np.sqrt((np.abs(h[a] - c) ** 2 * w[a]).sum() / 0.5) for c in cs)
    assert val == pytest.approx(brute, rel=1e-6)
    v1 = bmo_norm(h, mu, 1, 2.0, [I])["value"]
    brute1 = min((np.abs(h[a] - c) * w[a]).sum() / 0.5 for c in cs)
    assert v1 == pytest.approx(brute1, rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([1, 2]), st.floats(1.5, 5))
def test_bmo_median_and_mean_are_optimal(seed, p, kappa):
    mu = generate_measure("random_int", seed, N=4, zero_prob=0.2)
    f = np.random.default_rng(seed).standard_normal(16)
    g = random_grid(1, seed, 4)
    I = g.cubes(1)[0]
    val = bmo_norm(f, mu, p, kappa, [I])
    a = I.atoms(16)
    w = mu.flat[a].astype(float)
    big = mu.flat[enlarged_atoms(I, kappa, 16)].sum()
    if big == 0 or w.sum() == 0:
        return
    cs = np.concatenate([f[a], np.linspace(f.min(), f.max(), 400)])
    brute = min(((np.abs(f[a] - c) ** p * w).sum() / big) ** (1 / p) for c in cs)
    assert val["value"] <= brute + 1e-12
    assert val["value"] >= brute - 1e-2
    assert bmo_norm(2 * f, mu, p, kappa, [I])["value"] == pytest.approx(2 * val["value"])


def test_bmo_rejects():
    mu = generate_measure("uniform", N=2)
    with pytest.raises(SpacesError):
        bmo_norm(np.zeros(4), mu, 3, 2.0, [])
    with pytest.raises(SpacesError):
        bmo_norm(np.zeros(4), mu, 2, 1.0, [])


def test_bmo_skips_null_enlargements():
    mu = generate_measure("point_masses", N=3, masses=[(7, 1)])
    out = bmo_norm(np.arange(8.0), mu, 2, 2.0, [DyadicCube(3, (0,), 1)])
    assert out["skipped"] == 1 and out["value"] == 0


def test_weighted_median():
    assert weighted_median(np.array([1.0, 2.0, 3.0]), np.array([1.0, 1.0, 5.0])) == 3.0


def test_enlarged_atoms_clipped():
    assert list(enlarged_atoms(DyadicCube(2, (0,), 4), 5.0, 16)) == list(range(0, 12))


# -- maximal functions


def test_maximal_of_rectangle_indicator():
    fam = family(1)
    a, b = 3, 2
    mask = fam.rect_mask(a, b)
    M = strong_maximal(mask.astype(float), fam)
    pos = mask & (fam.weights() > 0)
    if fam.m1[a] * fam.m2[b] > 0:
        np.testing.assert_allclose(M[pos], 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_maximal_matches_brute_force(seed):
    fam = family(seed)
    u = np.random.default_rng(seed).standard_normal(fam.shape)
    np.testing.assert_allclose(fam.maximal(u), brute_maximal(u, fam), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_maximal_dominates_and_doob(seed):
    fam = family(seed, N=4)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(fam.shape) * rng.exponential(size=fam.shape) ** 2
    M = fam.maximal(u)
    w = fam.weights()
    pos = w > 0
    assert np.all(M[pos] >= np.abs(u[pos]) - 1e-12)
    assert np.sqrt((M ** 2 * w).sum()) <= 4 * np.sqrt((u ** 2 * w).sum())
    v = u * (1 + rng.random(u.shape))
    assert np.all(fam.maximal(v) >= M - 1e-12)


def test_one_param_maximal_brute_force():
    mu = generate_measure("random_iid", 4, N=4, zero_prob=0.3)
    g = random_grid(1, 5, 4)
    V = np.random.default_rng(0).standard_normal((3, 16))
    out = one_param_maximal(V, g, mu)
    ref = np.zeros_like(V)
    w = mu.flat
    for I in g.all_cubes:
        a = I.atoms(16)
        if w[a].sum() > 0:
            avg = (np.abs(V[:, a]) * w[a]).sum(axis=1) / w[a].sum()
            ref[:, a] = np.maximum(ref[:, a], avg[:, None])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_tilde_contains_positive_mass_part():
    fam = family(3, N=4)
    om = OmegaSet.from_rects(fam, [(1, 4), (6, 2)])
    t = fam.tilde(om.mask)
    pos = fam.weights() > 0
    assert np.all(t[om.mask & pos])


def test_generators_cover_union():
    fam = family(4, N=3)
    om = OmegaSet.from_rects(fam, [(1, 2), (4, 5), (0, 9)])
    cov = np.zeros(fam.shape, dtype=bool)
    for a, b in om.generators(fam):
        cov |= fam.rect_mask(a, b)
    np.testing.assert_array_equal(cov, om.mask)


# -- square function and product BMO


def _window_index(psys):
    i = int(np.nonzero(psys.sys_1.in_window)[0][0])
    j = int(np.nonzero(psys.sys_2.in_window)[0][0])
    return i, j


def test_square_function_single_term():
    psys = small_psys(1)
    i, j = _window_index(psys)
    F = np.multiply.outer(psys.sys_1.basis.H[i], psys.sys_2.basis.H[j])
    S = psys.square_function(F)
    fam = psys.family
    p1, p2 = psys.sys_1.parent[i], psys.sys_2.parent[j]
    mS = fam.m1[p1] * fam.m2[p2]
    np.testing.assert_allclose(S, fam.rect_mask(p1, p2) / np.sqrt(mS), atol=1e-12)
    assert (S * psys.weights()).sum() == pytest.approx(np.sqrt(mS))


def test_square_function_outside_window_is_zero():
    psys = small_psys(2)
    i = int(np.nonzero(~psys.sys_1.in_window & psys.sys_1.basis.nonzero)[0][0])
    F = np.multiply.outer(psys.sys_1.basis.H[i], np.ones(psys.shape[1]))
    assert np.abs(psys.square_function(F)).max() < 1e-14


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_square_function_l2_identity(seed):
    psys = small_psys(seed)
    F = np.random.default_rng(seed).standard_normal(psys.shape)
    S = psys.square_function(F)
    C = psys.coefficients(F) * psys.window
    assert (S ** 2 * psys.weights()).sum() == pytest.approx((C ** 2).sum(), rel=1e-10, abs=1e-14)


def test_bmo_prod_single_coefficient_and_zero():
    psys = small_psys(3)
    i, j = _window_index(psys)
    c = 2.5
    b = c * np.multiply.outer(psys.sys_1.basis.H[i], psys.sys_2.basis.H[j])
    est = bmo_prod_estimate(b, psys)
    fam = psys.family
    mS = fam.m1[psys.sys_1.parent[i]] * fam.m2[psys.sys_2.parent[j]]
    assert est.value >= c / np.sqrt(mS) - 1e-12
    assert bmo_prod_estimate(np.zeros(psys.shape), psys).value == 0


def brute_ratio(b, psys, mask):
    """Joint sum over S inside Omega of all window coefficients with S(R) = S."""
    fam = psys.family
    C = psys.coefficients(b) * psys.window
    inside = fam.contained(mask)
    s = 0.0
    for i in np.nonzero(psys.sys_1.in_window)[0]:
        for j in np.nonzero(psys.sys_2.in_window)[0]:
            if inside[psys.sys_1.parent[i], psys.sys_2.parent[j]]:
                s += C[i, j] ** 2
    m = (psys.weights() * mask).sum()
    return np.sqrt(s / m) if m > 0 else 0.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_bmo_prod_families(seed):
    psys = small_psys(seed)
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(psys.shape)
    single = bmo_prod_estimate(b, psys, "single_rects")
    greedy = bmo_prod_estimate(b, psys, "greedy")
    unions = bmo_prod_estimate(b, psys, "random_unions", k=3, trials=10, seed=seed)
    level = bmo_prod_estimate(b, psys, "level_sets", u=np.abs(b))
    assert greedy.value >= single.value - 1e-12
    best = bmo_prod_estimate(b, psys, ["single_rects", "greedy", "level_sets"], u=np.abs(b))
    assert best.value == pytest.approx(max(single.value, greedy.value, level.value))
    for est in (single, greedy, unions, level):
        assert est.value == pytest.approx(brute_ratio(b, psys, est.witness.mask), rel=1e-9, abs=1e-14)
    # adding a function with no window coefficients changes nothing
    i = int(np.nonzero(~psys.sys_1.in_window)[0][0])
    junk = np.multiply.outer(psys.sys_1.basis.H[i], rng.standard_normal(psys.shape[1]))
    assert bmo_prod_estimate(b + junk, psys, "single_rects").value == pytest.approx(single.value)


def test_bmo_prod_errors():
    psys = small_psys(4)
    b = np.zeros(psys.shape)
    with pytest.raises(SpacesError):
        bmo_prod_estimate(b, psys, [])
    with pytest.raises(SpacesError):
        bmo_prod_estimate(b, psys, "level_sets")
    with pytest.raises(SpacesError):
        bmo_prod_estimate(b, psys, "everything")


def test_lemma_bmo1():
    psys = small_psys(5, N=6)
    sys = psys.sys_1
    assert lemma_bmo1_check(np.ones(sys.mu.n_atoms), sys)["worst_C"] == 0
    rng = np.random.default_rng(5)
    cs = [lemma_bmo1_check(rng.standard_normal(sys.mu.n_atoms), sys)["worst_C"] for _ in range(10)]
    assert all(np.isfinite(cs)) and max(cs) > 0


# -- duality


def test_duality_single_term():
    psys = small_psys(6)
    i, j = _window_index(psys)
    h = np.multiply.outer(psys.sys_1.basis.H[i], psys.sys_2.basis.H[j])
    C = np.zeros(psys.window.shape)
    C[i, j] = 1.0
    rep = h1_bmo_duality_check(h, C, psys)
    fam = psys.family
    mS = fam.m1[psys.sys_1.parent[i]] * fam.m2[psys.sys_2.parent[j]]
    assert rep.pairing == pytest.approx(1.0)
    assert rep.s_norm_1 == pytest.approx(np.sqrt(mS))


def test_duality_orthogonal_b():
    psys = small_psys(7)
    C = desk.random_window_coefficients(psys, 1, density=0.3)
    rep = h1_bmo_duality_check(np.ones(psys.shape), C, psys)
    assert rep.pairing == pytest.approx(0, abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_duality_chain(seed):
    psys = small_psys(seed)
    rng = np.random.default_rng(seed)
    C = desk.random_window_coefficients(psys, seed, density=0.5)
    rep = h1_bmo_duality_check(rng.standard_normal(psys.shape), C, psys)
    for k in ("cs_step", "half_mass", "square_sum", "sup_bound", "layer_sum_bound"):
        assert rep.chain[k] <= 1e-9, k
    assert rep.chain["tilde_growth"] <= 64
    assert rep.chain["within_tilde"]
