import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyadic_t1 import desk
from dyadic_t1.paraproduct import (ConvergenceError, FullParaproduct, MixedParaproduct,
                                   OneParamParaproduct, ParaproductError, apply_full,
                                   apply_mixed, apply_one_param, full_bound_check, matrix_norm,
                                   mixed_duality_check, operator_norm)


def psys_for(seed, N=5):
    rng = np.random.default_rng(seed)
    mu1 = desk.measure("random_iid", int(rng.integers(2 ** 31)), N)
    mu2 = desk.measure("cantor_like", int(rng.integers(2 ** 31)), N)
    return desk.product_system(mu1, mu2, int(rng.integers(2 ** 31)))


def wdot(f, g, w):
    return float((f * g * w).sum())


# -- one parameter


def test_one_param_zero_symbol():
    sys = psys_for(1).sys_1
    op = OneParamParaproduct(np.zeros(sys.mu.n_atoms), sys)
    assert not op.apply(np.ones(sys.mu.n_atoms)).any()
    assert op.norm() == 0.0


def test_one_param_on_constant_projects_symbol():
    sys = psys_for(2).sys_1
    a = np.random.default_rng(2).standard_normal(sys.mu.n_atoms)
    op = OneParamParaproduct(a, sys)
    proj = sys.basis.H.T @ op.a_coef
    np.testing.assert_allclose(op.apply(np.ones(sys.mu.n_atoms)), proj, atol=1e-12)


def test_one_param_adjoint_and_dense_norm():
    sys = psys_for(3).sys_2
    n = sys.mu.n_atoms
    rng = np.random.default_rng(3)
    op = OneParamParaproduct(rng.standard_normal(n), sys)
    w = sys.mu.flat.astype(float)
    u, v = rng.standard_normal(n), rng.standard_normal(n)
    assert wdot(op.apply(u), v, w) == pytest.approx(wdot(u, op.adjoint(v), w), abs=1e-10)
    pos = w > 0
    T = np.stack([op.apply(e) for e in np.eye(n)], axis=1)[np.ix_(pos, pos)]
    d = np.sqrt(w[pos])
    dense = np.linalg.norm(d[:, None] * T / d[None, :], 2)
    assert op.norm(tol=1e-10) == pytest.approx(dense, rel=1e-4)


def test_one_param_index_errors():
    sys = psys_for(4).sys_1
    a = np.zeros(sys.mu.n_atoms)
    with pytest.raises(ParaproductError):
        OneParamParaproduct(a, sys, kappa=0)
    with pytest.raises(ParaproductError):
        OneParamParaproduct(a, sys, kappa=2)
    with pytest.raises(ParaproductError):
        apply_one_param(a, 0, a, sys)
    assert not apply_one_param(a, 1, np.ones_like(a), sys).any()


# -- full


def test_full_on_constant_is_window_projection():
    psys = psys_for(5)
    b = np.random.default_rng(5).standard_normal(psys.shape)
    op = FullParaproduct(b, psys)
    ref = psys.synthesize(psys.coefficients(b) * op.mask)
    np.testing.assert_allclose(op.apply(np.ones(psys.shape)), ref, atol=1e-12)


def test_full_zero_cases():
    psys = psys_for(6)
    u = np.random.default_rng(6).standard_normal(psys.shape)
    assert not FullParaproduct(np.zeros(psys.shape), psys).apply(u).any()
    b = np.random.default_rng(7).standard_normal(psys.shape)
    assert np.abs(FullParaproduct(b, psys).apply(np.zeros(psys.shape))).max() == 0
    with pytest.raises(ParaproductError):
        apply_full(b, 0, 1, u, psys)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_full_orthogonality_linearity_adjoint(seed):
    psys = psys_for(seed)
    rng = np.random.default_rng(seed)
    b, u, u2, v = (rng.standard_normal(psys.shape) for _ in range(4))
    op = FullParaproduct(b, psys)
    w = psys.weights()
    rep = full_bound_check(b, u, psys)
    assert rep.orth_residual <= 1e-10 * max(1, rep.norm_out ** 2)
    assert rep.ratio <= 1 + 1e-9
    np.testing.assert_allclose(op.apply(2 * u - u2), 2 * op.apply(u) - op.apply(u2), atol=1e-10)
    assert wdot(op.apply(u), v, w) == pytest.approx(wdot(u, op.adjoint(v), w), abs=1e-10)
    # the symbol enters linearly too
    op2 = FullParaproduct(b + v, psys)
    np.testing.assert_allclose(op2.apply(u), op.apply(u) + FullParaproduct(v, psys).apply(u),
                               atol=1e-10)


def test_full_index_restriction_splits():
    psys = psys_for(8)
    rng = np.random.default_rng(8)
    b, u = rng.standard_normal(psys.shape), rng.standard_normal(psys.shape)
    # in one dimension the only cancellative index is 1
    np.testing.assert_allclose(apply_full(b, 1, 1, u, psys), FullParaproduct(b, psys).apply(u),
                               atol=1e-12)


# -- mixed


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_mixed_duality_chain(seed):
    psys = psys_for(seed)
    rng = np.random.default_rng(seed)
    b, u, v = (rng.standard_normal(psys.shape) for _ in range(3))
    rep = mixed_duality_check(b, u, v, psys)
    assert rep["pairing_direct"] == pytest.approx(rep["pairing_via_b"], abs=1e-10)
    assert rep["pointwise_slack"] <= 1e-9
    assert rep["s_norm_1"] <= rep["cs_bound"] * (1 + 1e-12) + 1e-14
    assert rep["cs_bound"] <= rep["maximal_bound"]
    op = MixedParaproduct(b, psys)
    w = psys.weights()
    assert wdot(op.apply(u), v, w) == pytest.approx(wdot(u, op.adjoint(v), w), abs=1e-10)


def test_mixed_zero_and_errors():
    psys = psys_for(9)
    u = np.ones(psys.shape)
    assert not MixedParaproduct(np.zeros(psys.shape), psys).apply(u).any()
    with pytest.raises(ParaproductError):
        apply_mixed(u, 1, 0, u, psys)


# -- power iteration


def test_operator_norm_simple_cases():
    w = np.ones(6)
    assert operator_norm(lambda x: 0 * x, lambda y: 0 * y, w) == 0.0
    P = np.diag([1, 1, 0, 0, 0, 0.0])
    assert operator_norm(lambda x: P @ x, lambda y: P @ y, w) == pytest.approx(1.0)
    eps = np.array([0.5, -3.0, 2.0, 1.0, 0.0, 2.9])
    assert operator_norm(lambda x: eps * x, lambda y: eps * y, w) == pytest.approx(3.0, rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_matrix_norm_matches_svd(seed):
    M = np.random.default_rng(seed).standard_normal((7, 5))
    assert matrix_norm(M, tol=1e-12, max_iter=100000) == pytest.approx(np.linalg.norm(M, 2), rel=1e-6)


def test_operator_norm_weighted():
    w = np.array([1.0, 4.0])
    # x -> (x_2, 0): sends L2(w) mass 2|x_2| to |x_2|, norm 1/2
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    adj = np.diag(1 / w) @ A.T @ np.diag(w)
    assert operator_norm(lambda x: A @ x, lambda y: adj @ y, w) == pytest.approx(0.5)


def test_convergence_error():
    M = np.diag([1.0, 0.999999])
    with pytest.raises(ConvergenceError) as exc:
        matrix_norm(M, tol=1e-14, max_iter=3)
    assert exc.value.residual > 0
