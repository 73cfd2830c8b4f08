import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgptrial.errors import NumericalError
from lgptrial.gp import (
    CovMatrix,
    KernelParams,
    build_cov,
    cholesky_lower,
    cov_grads,
    cov_values,
    cross_cov,
    gp_conditional,
    kernel_grad_periodic,
    kernel_grad_sqexp,
    kernel_periodic,
    kernel_sqexp,
    mvn_sample,
)

REF = KernelParams(theta1=1.0, theta2=3.5, r=2.0)


def test_periodic_examples():
    assert kernel_periodic(0.4, 0.4, REF) == pytest.approx(1.01)
    assert kernel_periodic(0.2, 0.2 + 3.5, REF) == pytest.approx(1.0)
    assert kernel_periodic(0.0, 1.75, REF) == pytest.approx(math.exp(-4.0), rel=1e-12)
    assert kernel_periodic(0.0, 1.75, REF) == pytest.approx(0.0183156, abs=1e-7)


def test_sqexp_examples():
    p = KernelParams(theta1=1.0, r=3.0)
    assert kernel_sqexp(1.0, 1.0, p) == pytest.approx(1.01)
    assert kernel_sqexp(0.0, 1.0, p) == pytest.approx(1.2341e-4, rel=1e-4)
    assert kernel_sqexp(0.0, 0.5, KernelParams(theta1=0.0)) == 0.0


def test_params_invariants():
    with pytest.raises(ValueError):
        KernelParams(theta2=1e-4)
    with pytest.raises(ValueError):
        KernelParams(jitter=0.0)
    p = KernelParams(0.5, 2.0, 1.5)
    assert p.with_vector(p.vector("periodic")) == p
    assert np.allclose(p.vector("sqexp"), [0.5, 1.5])


def test_grad_at_zero_lag():
    assert kernel_grad_periodic(1.0, 1.0, REF) == pytest.approx((2.0, 0.0, 0.0))
    zero = KernelParams(theta1=0.0, theta2=3.5, r=2.0)
    g = kernel_grad_periodic(0.0, 0.7, zero)
    assert g[1] == 0.0 and g[2] == 0.0


def _fd(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


def test_grad_periodic_fd_example():
    th1, r, th2, dt = 1.0, 2.0, 3.5, 0.7
    g = kernel_grad_periodic(0.0, dt, KernelParams(th1, th2, r))
    fd = (
        _fd(lambda x: kernel_periodic(0.0, dt, KernelParams(x, th2, r)), th1),
        _fd(lambda x: kernel_periodic(0.0, dt, KernelParams(th1, th2, x)), r),
        _fd(lambda x: kernel_periodic(0.0, dt, KernelParams(th1, x, r)), th2),
    )
    for a, b in zip(g, fd):
        assert a == pytest.approx(b, rel=1e-6)


params_st = st.tuples(
    st.floats(0.2, 2.0), st.floats(0.5, 5.0), st.floats(0.3, 3.0), st.floats(0.05, 3.0)
)


@settings(max_examples=60, deadline=None)
@given(params_st)
def test_grad_periodic_fd_random(vals):
    th1, th2, r, dt = vals
    g = kernel_grad_periodic(0.0, dt, KernelParams(th1, th2, r))
    fd = (
        _fd(lambda x: kernel_periodic(0.0, dt, KernelParams(x, th2, r)), th1),
        _fd(lambda x: kernel_periodic(0.0, dt, KernelParams(th1, th2, x)), r),
        _fd(lambda x: kernel_periodic(0.0, dt, KernelParams(th1, x, r)), th2),
    )
    for a, b in zip(g, fd):
        assert a == pytest.approx(b, rel=1e-6, abs=1e-9)


def test_grad_sqexp_fd():
    th1, r, dt = 0.8, 1.7, 0.45
    g = kernel_grad_sqexp(0.0, dt, KernelParams(th1, 3.5, r))
    assert g[0] == pytest.approx(_fd(lambda x: kernel_sqexp(0.0, dt, KernelParams(x, 3.5, r)), th1), rel=1e-6)
    assert g[1] == pytest.approx(_fd(lambda x: kernel_sqexp(0.0, dt, KernelParams(th1, 3.5, x)), r), rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), params_st)
def test_periodic_symmetry_and_period(tu, tv, vals):
    p = KernelParams(vals[0], vals[1], vals[2])
    assert kernel_periodic(tu, tv, p) == pytest.approx(kernel_periodic(tv, tu, p), rel=1e-12)
    if tu != tv and tu + p.theta2 != tv:
        assert kernel_periodic(tu + p.theta2, tv, p) == pytest.approx(kernel_periodic(tu, tv, p), rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("kernel", ["periodic", "sqexp"])
def test_matrix_forms_match_scalar(kernel):
    t = np.array([0.1, 0.4, 0.5, 1.3])
    scalar = kernel_periodic if kernel == "periodic" else kernel_sqexp
    grad = kernel_grad_periodic if kernel == "periodic" else kernel_grad_sqexp
    C = cov_values(t, kernel, REF)
    G = cov_grads(t, kernel, REF)
    for u in range(t.size):
        for v in range(t.size):
            assert C[u, v] == pytest.approx(scalar(t[u], t[v], REF), rel=1e-13)
            assert np.allclose(G[:, u, v], grad(t[u], t[v], REF), rtol=1e-12, atol=1e-15)


def test_build_cov_examples():
    c = build_cov([0.3], "periodic", REF)
    assert c.values[0, 0] == pytest.approx(1.01)
    assert c.logdet == pytest.approx(math.log(1.01))
    full = build_cov(np.arange(1, 36) / 10, "periodic", REF)
    assert np.isfinite(full.logdet)
    assert np.allclose(full.chol @ full.chol.T, full.values, rtol=1e-10, atol=1e-12)
    d = np.array([0.5, 2.0, 3.0])
    assert CovMatrix.from_values(np.diag(d)).logdet == pytest.approx(np.log(d).sum())


def test_cholesky_failure_names_minor():
    bad = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 2.0], [0.0, 2.0, 1.0]])
    with pytest.raises(NumericalError) as exc:
        cholesky_lower(bad)
    assert exc.value.minor == 3
    assert "order 3" in str(exc.value)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 3.5), min_size=1, max_size=12, unique=True), params_st)
def test_build_cov_pd_on_distinct_times(times, vals):
    p = KernelParams(vals[0], vals[1], vals[2])
    for kernel in ("periodic", "sqexp"):
        c = build_cov(times, kernel, p)
        assert np.isfinite(c.logdet)
        assert np.allclose(c.values, c.values.T)


def test_mvn_sample_reproducible_and_covariance():
    eye = CovMatrix.from_values(np.eye(3))
    a = mvn_sample(np.zeros(3), eye, np.random.default_rng(7))
    b = mvn_sample(np.zeros(3), eye, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    cov = CovMatrix.from_values(np.array([[1.0, 0.5], [0.5, 1.0]]))
    draws = mvn_sample(np.zeros(2), cov, np.random.default_rng(1), size=100_000)
    emp = np.cov(draws.T)
    assert np.allclose(emp, cov.values, atol=0.02)
    with pytest.raises(ValueError):
        mvn_sample(np.zeros(3), cov, np.random.default_rng(0))


def linear_mean(t):
    return -0.8 + 0.4 * np.asarray(t)


def test_conditional_empty_obs_is_prior():
    new = np.array([0.5, 1.0])
    mean, cov = gp_conditional([], [], new, linear_mean, "periodic", REF)
    assert np.allclose(mean, linear_mean(new))
    assert np.allclose(cov.values, cov_values(new, "periodic", REF))


def test_conditional_scalar_kriging():
    t1, t2, a1 = 0.3, 0.9, 0.7
    mean, cov = gp_conditional([t1], [a1], [t2], linear_mean, "periodic", REF)
    c11 = kernel_periodic(t1, t1, REF)
    c12 = kernel_periodic(t1, t2, REF)
    c22 = kernel_periodic(t2, t2, REF)
    assert mean[0] == pytest.approx(linear_mean(t2) + c12 / c11 * (a1 - linear_mean(t1)))
    assert cov.values[0, 0] == pytest.approx(c22 - c12**2 / c11)


def brute_conditional(t_obs, a_obs, t_new, kernel, p):
    """Partition the full joint built element by element; solve with a dense inverse."""
    scalar = kernel_periodic if kernel == "periodic" else kernel_sqexp
    t = np.concatenate([t_obs, t_new])
    n = t_obs.size
    J = np.array([[scalar(u, v, p) for v in t] for u in t])
    mu = linear_mean(t)
    Soo, Son, Snn = J[:n, :n], J[:n, n:], J[n:, n:]
    inv = np.linalg.inv(Soo)
    return mu[n:] + Son.T @ inv @ (a_obs - mu[:n]), Snn - Son.T @ inv @ Son


def test_conditional_brute_force(rng):
    for _ in range(20):
        t = np.sort(rng.choice(np.arange(1, 36), 8, replace=False)) / 10
        obs = rng.permutation(8)[:5]
        new = np.setdiff1d(np.arange(8), obs)
        p = KernelParams(rng.uniform(0.5, 1.5), rng.uniform(2, 5), rng.uniform(0.5, 3))
        a = rng.normal(size=5)
        mean, cov = gp_conditional(t[obs], a, t[new], linear_mean, "periodic", p)
        m2, c2 = brute_conditional(t[obs], a, t[new], "periodic", p)
        assert np.allclose(mean, m2, rtol=1e-10, atol=0)
        assert np.allclose(cov.values, c2, rtol=1e-10, atol=1e-13)
        assert np.all(np.linalg.eigvalsh(cov.values) > 0)


def test_conditional_rows_share_covariance(rng):
    t_obs, t_new = np.array([0.1, 0.2, 0.3]), np.array([0.4, 0.5])
    A = rng.normal(size=(4, 3))
    mean, cov = gp_conditional(t_obs, A, t_new, linear_mean, "periodic", REF)
    for row in range(4):
        m1, c1 = gp_conditional(t_obs, A[row], t_new, linear_mean, "periodic", REF)
        assert np.allclose(mean[row], m1)
        assert np.allclose(cov.values, c1.values)


def test_cross_cov_has_no_jitter():
    c = cross_cov([0.5], [0.5], "periodic", REF)
    assert c[0, 0] == pytest.approx(1.0)
