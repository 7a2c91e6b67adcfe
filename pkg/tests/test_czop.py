import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyadic_t1 import desk
from dyadic_t1.czop import (Composite, HaarMultiplier, OperatorError, TensorKernel, a_in,
                            a_in_matrix, a_sep, a_sep_matrix, apply_T1, containing_child,
                            cz_kernel_matrix, partial_adjoint_residual, schur_checks,
                            schur_constant, tb_necessity_experiment,
                            verify_standard_estimates)
from dyadic_t1.czop import testing_conditions as conditions
from dyadic_t1.grid import DyadicCube, random_grid
from dyadic_t1.measure import PowerLaw, generate_measure


def kernel_for(seed, N=3, pv=True):
    mu1 = generate_measure("random_iid", seed, N, zero_prob=0.2)
    mu2 = generate_measure("random_int", seed + 1, N)
    return TensorKernel(mu1, mu2, PowerLaw(2.0), PowerLaw(1.5), pv=pv)


def psys_for(seed, N=5):
    rng = np.random.default_rng(seed)
    mu1 = desk.measure("random_iid", int(rng.integers(2 ** 31)), N)
    mu2 = desk.measure("cantor_like", int(rng.integers(2 ** 31)), N)
    return desk.product_system(mu1, mu2, int(rng.integers(2 ** 31)))


# -- kernels


def test_kernel_matrix_conventions():
    mu = generate_measure("uniform", N=3)
    k = cz_kernel_matrix(mu, PowerLaw(1.0))
    assert np.all(np.diag(k) == 0)
    assert np.isnan(np.diag(cz_kernel_matrix(mu, PowerLaw(1.0), pv=False))).all()
    # x-independent lambda gives an antisymmetric kernel
    np.testing.assert_allclose(k.T, -k)
    assert k[2, 0] == pytest.approx(1 / (2 / 8))
    with pytest.raises(OperatorError):
        cz_kernel_matrix(generate_measure("uniform", N=2, dim=2), PowerLaw(1.0, 1.0, 2))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_pairing_matches_quadruple_loop(seed):
    T = kernel_for(seed)
    rng = np.random.default_rng(seed)
    F, G = rng.standard_normal(T.shape), rng.standard_normal(T.shape)
    n1, n2 = T.shape
    ref = 0.0
    for x1, x2, y1, y2 in itertools.product(range(n1), range(n2), range(n1), range(n2)):
        ref += (T.k1[x1, y1] * T.k2[x2, y2] * F[y1, y2] * T.weights[y1, y2]
                * G[x1, x2] * T.weights[x1, x2])
    assert T.pairing(F, G) == pytest.approx(ref, rel=1e-10, abs=1e-12)
    f1, f2, g1, g2 = (rng.standard_normal(n) for n in (n1, n2, n1, n2))
    assert T.pairing_tensor(f1, f2, g1, g2) == pytest.approx(
        T.pairing(np.multiply.outer(f1, f2), np.multiply.outer(g1, g2)), rel=1e-10, abs=1e-12)
    assert T.pairing(F, G) == pytest.approx(T.adjoint().pairing(G, F), rel=1e-10, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_partial_adjoint_identity(seed):
    T = kernel_for(seed)
    rng = np.random.default_rng(seed)
    n1, n2 = T.shape
    f1, f2, g1, g2 = (rng.standard_normal(n) for n in (n1, n2, n1, n2))
    scale = max(1, abs(T.pairing_tensor(f1, f2, g1, g2)))
    assert abs(partial_adjoint_residual(T, f1, f2, g1, g2)) <= 1e-12 * scale
    # dense form: M1[(x1, x2), (y1, y2)] = M[(y1, x2), (x1, y2)]
    P = TensorKernel(generate_measure("random_iid", seed, 3), generate_measure("random_iid", seed + 1, 3),
                     PowerLaw(2.0), PowerLaw(1.5), pv=True)
    M = P.dense().reshape(n1, n2, n1, n2)
    M1 = P.partial_adjoint().dense().reshape(n1, n2, n1, n2)
    np.testing.assert_allclose(M1, M.transpose(2, 1, 0, 3), atol=1e-12)


def test_symmetry_table():
    T = kernel_for(3)
    s = T.symmetries()
    np.testing.assert_array_equal(s["K*"][0], T.k1.T)
    np.testing.assert_array_equal(s["K1"][1], T.k2)
    np.testing.assert_array_equal(s["K1*"][1], T.k2.T)
    np.testing.assert_array_equal(T.adjoint().k2, T.k2.T)


def test_non_pv_support_checks():
    T = kernel_for(4, pv=False)
    n1, n2 = T.shape
    F = np.zeros(T.shape)
    F[0, 0] = 1
    with pytest.raises(OperatorError):
        T.pairing(F, F)
    G = np.zeros(T.shape)
    G[1, 1] = 1
    assert np.isfinite(T.pairing(F, G))
    with pytest.raises(OperatorError):
        T.kernel(0, 1, 0, 2)


def test_standard_estimates_for_power_law():
    mu = generate_measure("random_iid", 5, N=5)
    T = TensorKernel(mu, mu, PowerLaw(1.0), PowerLaw(1.0), pv=True)
    rep = verify_standard_estimates(T, samples=500, seed=1)
    for name, w in rep.items():
        # |k| lambda is exactly 1 off the diagonal
        assert w["size"] == pytest.approx(1.0), name
        # |1 - r/r'| <= 2 |y - y'| / r when |y - y'| <= r / 2
        assert w["mixed_1"] <= 2 + 1e-12 and w["mixed_2"] <= 2 + 1e-12
        assert w["holder"] <= 4 + 1e-12


def test_norm_bound_against_dense():
    T = kernel_for(6)
    assert T.norm(tol=1e-10) == pytest.approx(T.norm_bound(), rel=1e-5)


# -- coefficient bounds


def test_a_sep_hand_example():
    mu = generate_measure("uniform", N=4)
    I1, I2 = DyadicCube(2, (0,), 4), DyadicCube(2, (8,), 4)
    # l = 1/4 each, gap 1/4, lambda(r) = r at r = 3/4, masses 1/4
    assert a_sep(I1, I2, 1.0, PowerLaw(1.0), mu) == pytest.approx(1 / 9)
    with pytest.raises(OperatorError):
        a_sep(DyadicCube(1, (0,), 8), I2, 1.0, PowerLaw(1.0), mu)


def test_a_in_hand_example():
    mu = generate_measure("uniform", N=4)
    J1, J2 = DyadicCube(3, (0,), 2), DyadicCube(0, (0,), 16)
    assert containing_child(J1, J2) == DyadicCube(1, (0,), 8)
    assert a_in(J1, J2, 1.0, mu) == pytest.approx(np.sqrt(1 / 8) * 0.5)
    with pytest.raises(OperatorError):
        a_in(DyadicCube(2, (0,), 4), DyadicCube(1, (0,), 8), 1.0, mu)
    with pytest.raises(OperatorError):
        a_in(DyadicCube(3, (8,), 2), DyadicCube(1, (0,), 8), 1.0, mu, r=0)


def test_matrices_match_pointwise_formulas():
    mu = generate_measure("random_iid", 9, N=4, zero_prob=0.2)
    g1, g2 = random_grid(1, 1, 4), random_grid(1, 2, 4)
    lam = PowerLaw(1.3)
    A = a_sep_matrix(g1, g2, mu, lam, 1.0)
    B = a_in_matrix(g1, g2, mu, 1.0, r=1)
    for i, I in enumerate(g1.all_cubes):
        for j, J in enumerate(g2.all_cubes):
            if len(I.atoms(mu.side)) == 0 or len(J.atoms(mu.side)) == 0:
                continue
            if I.side <= J.side:
                assert A[i, j] == pytest.approx(a_sep(I, J, 1.0, lam, mu), rel=1e-12)
            else:
                assert A[i, j] == 0
            ch = containing_child(I, J) if I.side < J.side else None
            if ch is not None and I.side * 2 < J.side:
                assert B[i, j] == pytest.approx(a_in(I, J, 1.0, mu), rel=1e-12, abs=1e-15)
            else:
                assert B[i, j] == 0


# -- Schur


def test_schur_small_cases():
    rep = schur_checks(np.array([[2.0]]), [np.ones(1)], [np.ones(1)], constant=2.0)
    assert rep.worst_bilinear == rep.worst_square == pytest.approx(2.0)
    assert rep.spectral_norm == pytest.approx(2.0) and rep.passed
    Z = np.zeros((3, 3))
    assert schur_constant(Z) == 0
    assert schur_checks(Z, [np.ones(3)], [np.ones(3)], 0.0).passed
    with pytest.raises(OperatorError):
        schur_checks(Z, [-np.ones(3)], [np.ones(3)], 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_schur_bounded_by_spectral_norm(seed):
    rng = np.random.default_rng(seed)
    A = rng.exponential(size=(6, 4))
    xs, ys = rng.exponential(size=(10, 6)), rng.exponential(size=(10, 4))
    rep = schur_checks(A, xs, ys, schur_constant(A) * (1 + 1e-8))
    assert rep.passed
    assert rep.spectral_norm == pytest.approx(np.linalg.norm(A, 2), rel=1e-6)


# -- multipliers and testing conditions


def test_haar_multiplier_diagonal():
    psys = psys_for(1)
    M = HaarMultiplier.random(psys, 1)
    i = int(np.nonzero(psys.sys_1.in_window)[0][0])
    j = int(np.nonzero(psys.sys_2.in_window)[0][0])
    h = np.multiply.outer(psys.sys_1.basis.H[i], psys.sys_2.basis.H[j])
    np.testing.assert_allclose(M.apply(h), M.eps[i, j] * h, atol=1e-12)
    assert M.norm(tol=1e-10) == pytest.approx(M.exact_norm, rel=1e-4)
    assert M.partial_adjoint() is M
    with pytest.raises(OperatorError):
        HaarMultiplier(psys, 2 * np.ones(psys.window.shape))
    with pytest.raises(OperatorError):
        HaarMultiplier(psys, np.ones(3))


def test_composite():
    psys = psys_for(2)
    M = HaarMultiplier.random(psys, 2)
    C = Composite([M, M])
    F = np.random.default_rng(2).standard_normal(psys.shape)
    np.testing.assert_allclose(C.apply(F), 2 * M.apply(F))
    assert C.norm_bound() == pytest.approx(2 * M.exact_norm)
    with pytest.raises(OperatorError):
        Composite([])


def _cubes(psys, rng, n=25):
    g1, g2 = psys.sys_1.grid, psys.sys_2.grid
    out = []
    for _ in range(n):
        a, b = int(rng.integers(1, g1.depth)), int(rng.integers(1, g2.depth))
        out.append((g1.cubes(a)[int(rng.integers(g1.n_cubes(a)))],
                    g2.cubes(b)[int(rng.integers(g2.n_cubes(b)))]))
    return out


def test_testing_conditions_multiplier():
    psys = psys_for(3)
    rng = np.random.default_rng(3)
    cubes = _cubes(psys, rng)
    w = conditions(HaarMultiplier.random(psys, 3), psys.sys_1.mu, psys.sys_2.mu, cubes)
    assert w["wbp"] <= 1 + 1e-12
    zero = HaarMultiplier(psys, np.zeros(psys.window.shape))
    z = conditions(zero, psys.sys_1.mu, psys.sys_2.mu, cubes)
    assert z["wbp"] == z["bmo_1"] == z["bmo_2"] == z["diagonal"] == 0


def test_T1_and_necessity_trivial_cases():
    psys = psys_for(4)
    ident = HaarMultiplier(psys, np.ones(psys.window.shape))
    ones = np.ones(psys.shape)
    ref = psys.synthesize(psys.coefficients(ones) * psys.window)
    np.testing.assert_allclose(apply_T1(ident), ref, atol=1e-12)
    rep = tb_necessity_experiment(ident, [np.zeros(psys.shape)], psys)
    assert rep.values == [0.0] and rep.passed is None
    b = desk.random_sign_function(psys.shape, 4)
    rep = tb_necessity_experiment(ident, [b], psys, constant=10.0)
    assert rep.structure_ok and rep.passed
