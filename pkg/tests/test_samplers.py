import math

import numpy as np
import pytest
from scipy import stats

from lgptrial.data import PatientSeries, TrialDataset
from lgptrial.errors import NumericalError
from lgptrial.gp import KernelParams, build_cov
from lgptrial.model import ArmMeanModel, LatentState, PriorConfig, design_matrix
from lgptrial.samplers import (
    McmcConfig,
    StepSizeAdapter,
    autocorrelation,
    degree_log_weights,
    diagnostics,
    effective_sample_size,
    gibbs_update_latent,
    hmc_step,
    hmc_update_theta,
    leapfrog,
    load_draws,
    run_chain,
    sample_beta,
    sample_degree,
    sample_truncnorm,
    save_draws,
    truncnorm_std,
    write_trace_csv,
)
from lgptrial.sim import SENSITIVITY, generate_outcomes

P = KernelParams(1.0, 3.5, 2.0)


# -- truncated normal ---------------------------------------------------------

def test_truncnorm_untruncated(rng):
    x = np.array([sample_truncnorm(1.5, 2.0, -np.inf, np.inf, rng) for _ in range(20000)])
    x2 = 1.5 + 2.0 * truncnorm_std(np.full(100_000, -np.inf), np.inf, rng)
    assert abs(x.mean() - 1.5) < 0.05
    assert abs(x2.mean() - 1.5) < 0.02


def test_truncnorm_half_normal(rng):
    x = truncnorm_std(np.zeros(100_000), np.inf, rng)
    assert np.all(x > 0)
    assert abs(x.mean() - math.sqrt(2 / math.pi)) < 0.01


@pytest.mark.parametrize("lo", [10.0, 40.0])
def test_truncnorm_far_tail(rng, lo):
    x = truncnorm_std(np.full(10_000, lo), np.inf, rng)
    assert np.all(np.isfinite(x)) and np.all(x > lo)
    # mean of the tail is close to the inverse Mills ratio
    assert abs(x.mean() - math.exp(stats.norm.logpdf(lo) - stats.norm.logsf(lo))) < 0.01
    y = truncnorm_std(-np.inf, np.full(10_000, -lo), rng)
    assert np.all(y < -lo)


@pytest.mark.parametrize("lo,hi", [(-1.0, 0.5), (0.3, 2.0), (-3.0, -2.5), (4.0, 6.0), (5.5, 5.6), (-np.inf, -0.7)])
def test_truncnorm_matches_scipy_distribution(rng, lo, hi):
    x = truncnorm_std(np.full(20_000, lo), hi, rng)
    assert np.all((x > lo) & (x < hi))
    assert stats.kstest(x, stats.truncnorm(lo, hi).cdf).pvalue > 1e-3


def test_truncnorm_rejects_bad_sigma(rng):
    with pytest.raises(ValueError):
        sample_truncnorm(0.0, 0.0, 0.0, 1.0, rng)
    with pytest.raises(ValueError):
        sample_truncnorm(0.0, 1.0, 1.0, 1.0, rng)


# -- latent Gibbs ---------------------------------------------------------------

def one_patient(weeks, outcomes):
    return TrialDataset((PatientSeries(1, "a", weeks, outcomes),))


def test_gibbs_single_point_matches_truncated_mean(rng):
    data = one_patient([7], [1])
    mu = -0.3
    state = LatentState([np.array([0.5])], {1: ArmMeanModel(0, [mu])}, P)
    draws = []
    for _ in range(10_000):
        state.a[0] = gibbs_update_latent(state, 0, data, rng)
        draws.append(state.a[0][0])
    sd = math.sqrt(P.theta1**2 + P.jitter**2)
    expect = stats.truncnorm((0 - mu) / sd, np.inf, loc=mu, scale=sd).mean()
    assert abs(np.mean(draws) - expect) < 0.02


def test_gibbs_respects_constraints(rng):
    data = one_patient([1, 2, 3, 9, 10], [1, 1, 1, 1, 1])
    state = LatentState([np.full(5, 0.5)], {1: ArmMeanModel(0, [-2.0])}, P)
    for _ in range(200):
        state.a[0] = gibbs_update_latent(state, 0, data, rng)
        assert np.all(state.a[0] > 0)


def test_gibbs_stationary_against_rejection(rng):
    weeks, e = [3, 4, 6], [1, 0, 1]
    data = one_patient(weeks, e)
    mean = ArmMeanModel(1, [0.1, -0.2])
    t = np.array(weeks) / 10
    mu = mean(t)
    cov = build_cov(t, "periodic", P)
    z = rng.standard_normal((400_000, 3)) @ cov.chol.T + mu
    ok = np.all((z > 0) == (np.array(e) == 1), axis=1)
    target = z[ok].mean(axis=0)
    state = LatentState([np.array([0.5, -0.5, 0.5])], {1: mean}, P)
    draws = np.empty((10_000, 3))
    for i in range(draws.shape[0]):
        state.a[0] = gibbs_update_latent(state, 0, data, rng)
        draws[i] = state.a[0]
    assert np.all(np.abs(draws.mean(axis=0) - target) < 0.03)


# -- degree and coefficients ----------------------------------------------------

def test_degree_single_category(rng):
    data = one_patient([1, 2], [1, 0])
    state = LatentState([np.array([0.3, -0.4])], {1: ArmMeanModel(0, [0.0])}, P)
    assert all(sample_degree(1, state, data, PriorConfig(M=0), rng) == 0 for _ in range(20))


def test_degree_weights_against_prior_sampling(rng):
    weeks = [2, 9, 15, 24, 31]
    t = np.array(weeks) / 10
    a = np.array([0.4, 0.9, 1.3, 0.7, -0.2])
    prior = PriorConfig(M=2, sigma0_sq=1.0, mu0=0.2)
    data = one_patient(weeks, (a > 0).astype(int))
    from lgptrial.batch import PatientBatch

    batch = PatientBatch(data)
    Q, b = batch.log_marginal_terms(batch.factors("periodic", P), batch.pad([a]), 1, prior.M)
    w = degree_log_weights(Q, b, prior)
    cov = build_cov(t, "periodic", P)
    # terms of log N(a; X beta, C) that do not depend on beta or the degree
    const = -0.5 * a @ cov.solve(a) - 0.5 * cov.logdet - 2.5 * math.log(2 * math.pi) + math.log(prior.M + 1)
    for h in range(prior.M + 1):
        beta = 0.2 + rng.standard_normal((100_000, h + 1))
        resid = a - beta @ design_matrix(t, h).T
        z = cov.whiten(resid.T)
        lik = np.exp(-0.5 * np.sum(z * z, axis=0) - 0.5 * cov.logdet - 2.5 * math.log(2 * math.pi))
        se = lik.std() / math.sqrt(lik.size)
        assert abs(lik.mean() - math.exp(w[h] + const)) < 3 * se


def test_degree_weights_permutation_invariant(rng):
    pats = [PatientSeries(1, str(j), sorted(rng.choice(np.arange(1, 30), 4, replace=False)), [1, 0, 1, 0])
            for j in range(5)]
    a = [np.array([0.5, -0.5, 0.2, -0.1]) * (j + 1) for j in range(5)]
    from lgptrial.batch import PatientBatch

    def weights(order):
        data = TrialDataset(tuple(pats[j] for j in order))
        batch = PatientBatch(data)
        Q, b = batch.log_marginal_terms(batch.factors("periodic", P), batch.pad([a[j] for j in order]), 1, 5)
        return degree_log_weights(Q, b, PriorConfig())

    assert np.allclose(weights(range(5)), weights([3, 1, 4, 0, 2]), rtol=1e-10)


def test_degree_weights_underflow_raises():
    from lgptrial.samplers import _normalise_log

    with pytest.raises(NumericalError):
        _normalise_log(np.full(3, -np.inf))


def test_beta_without_data_is_prior(rng):
    prior = PriorConfig(mu0=0.5, sigma0_sq=4.0)
    state = LatentState([], {1: ArmMeanModel(1, [0.0, 0.0])}, P)
    data = TrialDataset((PatientSeries(2, "x", [1], [1]),))
    draws = np.array([sample_beta(1, state, data, prior, rng) for _ in range(20_000)])
    assert np.allclose(draws.mean(axis=0), 0.5, atol=0.05)
    assert np.allclose(draws.var(axis=0), 4.0, rtol=0.05)


def test_beta_scalar_conjugate(rng):
    a = 0.8
    prior = PriorConfig(mu0=0.3, sigma0_sq=2.0)
    data = one_patient([12], [1])
    state = LatentState([np.array([a])], {1: ArmMeanModel(0, [0.0])}, P)
    cinv = 1 / (P.theta1**2 + P.jitter**2)
    mean = (cinv * a + 0.3 / 2.0) / (cinv + 1 / 2.0)
    draws = np.array([sample_beta(1, state, data, prior, rng)[0] for _ in range(20_000)])
    assert abs(draws.mean() - mean) < 0.02
    assert draws.var() == pytest.approx(1 / (cinv + 0.5), rel=0.05)


def test_beta_mc_mean_matches_closed_form(rng):
    pats = tuple(PatientSeries(1, str(j), [3 + j, 10 + j, 20 + j], [1, 0, 1]) for j in range(4))
    data = TrialDataset(pats)
    a = [np.array([0.3, -0.6, 0.9]) + 0.1 * j for j in range(4)]
    state = LatentState(a, {1: ArmMeanModel(2, np.zeros(3))}, P)
    prior = PriorConfig()
    Q = np.zeros((3, 3))
    b = np.zeros(3)
    for i in range(4):
        t = data.times(i)
        X = design_matrix(t, 2)
        cinv = np.linalg.inv(build_cov(t, "periodic", P).values)
        Q += X.T @ cinv @ X
        b += X.T @ cinv @ a[i]
    closed = np.linalg.solve(Q + np.eye(3) / 100, b)
    draws = np.array([sample_beta(1, state, data, prior, rng) for _ in range(10_000)])
    sd = np.sqrt(np.diag(np.linalg.inv(Q + np.eye(3) / 100)))
    assert np.all(np.abs(draws.mean(axis=0) - closed) < np.maximum(0.02, 4 * sd / 100))


# -- Hybrid Monte Carlo ---------------------------------------------------------

def test_leapfrog_hand_step():
    theta, w, _ = leapfrog(np.array([1.0]), np.array([0.0]), lambda x: x, 0.1, 1)
    assert theta[0] == pytest.approx(0.995, abs=1e-12)
    assert w[0] == pytest.approx(-0.09975, abs=1e-12)


def test_leapfrog_reversible(rng):
    A = np.array([[2.0, 0.3, 0.1], [0.3, 1.0, -0.2], [0.1, -0.2, 0.7]])
    grad = lambda x: A @ x + 0.1 * np.sin(x)  # noqa: E731
    x0, w0 = rng.normal(size=3), rng.normal(size=3)
    x1, w1, _ = leapfrog(x0, w0, grad, 0.05, 20)
    x2, w2, _ = leapfrog(x1, w1, grad, -0.05, 20)
    assert np.allclose(x2, x0, rtol=1e-10, atol=1e-12)
    assert np.allclose(w2, w0, rtol=1e-10, atol=1e-12)


def gaussian_energy(mean, cov):
    prec = np.linalg.inv(cov)

    def f(x):
        d = x - mean
        return 0.5 * d @ prec @ d, prec @ d

    return f


def test_hmc_zero_step_always_accepts(rng):
    f = gaussian_energy(np.zeros(2), np.eye(2))
    x = np.array([0.3, -1.2])
    for _ in range(20):
        res = hmc_step(x, f, 0.0, 5, rng)
        assert res.accepted and np.array_equal(res.theta, x)


def test_hmc_gaussian_target(rng):
    mean = np.array([1.0, -2.0])
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    f = gaussian_energy(mean, cov)
    x = mean.copy()
    out = []
    for it in range(30_000):
        x = hmc_step(x, f, 0.15, 20, rng).theta
        if it % 3 == 0:
            out.append(x)
    out = np.array(out[:10_000])
    assert np.all(np.abs(out.mean(axis=0) - mean) < 0.05)
    emp = np.cov(out.T)
    assert np.all(np.abs(emp - cov) <= 0.1 * np.abs(cov))


def test_hmc_chi_square_1d(rng):
    f = gaussian_energy(np.zeros(1), np.eye(1))
    x = np.zeros(1)
    draws = np.empty(100_000)
    for i in range(draws.size):
        x = hmc_step(x, f, 0.5, 3, rng).theta
        draws[i] = x[0]
    thin = draws[::5]
    edges = np.concatenate([[-np.inf], np.linspace(-2.5, 2.5, 11), [np.inf]])
    counts = np.histogram(thin, edges)[0]
    probs = np.diff(stats.norm.cdf(edges))
    assert stats.chisquare(counts, probs * thin.size).pvalue > 0.01


def test_hmc_invalid_region_rejects(rng):
    f = gaussian_energy(np.zeros(1), np.eye(1))
    res = hmc_step(np.array([0.5]), f, 0.1, 10, rng, valid=lambda x: False)
    assert not res.accepted and res.theta[0] == 0.5


def test_hmc_nonfinite_energy_rejects(rng):
    res = hmc_step(np.array([0.5]), lambda x: (np.inf, np.array([np.nan])), 0.1, 2, rng,
                   current=(0.1, np.array([1.0])))
    assert not res.accepted


def test_hmc_update_theta_keeps_floor(rng):
    data = one_patient([1, 5, 9], [1, 0, 1])
    state = LatentState([np.array([0.4, -0.3, 0.2])], {1: ArmMeanModel(0, [0.0])},
                        KernelParams(1.0, 0.002, 1.0))
    for _ in range(30):
        k, _ = hmc_update_theta(state, data, PriorConfig(), McmcConfig(hmc_eps=0.05), rng)
        assert abs(k.theta2) >= 1e-3
        state.kernel = k


def test_step_size_adapter():
    ad = StepSizeAdapter(0.01)
    for _ in range(10):
        ad.update(1.0)
    assert ad.eps > 0.01
    hi = ad.eps
    for _ in range(40):
        ad.update(0.0)
    assert ad.eps < hi


# -- chain ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_data():
    return generate_outcomes(SENSITIVITY[2], 15, np.arange(1, 21), np.random.default_rng(5))


def test_chain_deterministic_and_counts(small_data):
    cfg = McmcConfig(n_iters=120, burn_in=20, thin=5, seed=4)
    d1 = run_chain(small_data, config=cfg)
    d2 = run_chain(small_data, config=cfg)
    assert len(d1) == (120 - 20) // 5
    for name in ("m", "beta", "theta", "latent"):
        np.testing.assert_array_equal(getattr(d1, name), getattr(d2, name))
    d3 = run_chain(small_data, config=McmcConfig(n_iters=120, burn_in=20, thin=5, seed=5))
    assert not np.array_equal(d1.theta, d3.theta)


def test_default_retained_count():
    assert McmcConfig().n_retained == 800
    with pytest.raises(ValueError):
        McmcConfig(n_iters=10, burn_in=10)


def test_chain_constraints_hold(small_data):
    draws = run_chain(small_data, config=McmcConfig(n_iters=150, burn_in=50, thin=2, seed=1))
    for i, p in enumerate(small_data.patients):
        a = draws.latent[:, i, : p.n_obs]
        assert np.array_equal(a > 0, np.broadcast_to(p.outcomes == 1, a.shape))


def test_chain_threshold_shift(small_data):
    draws = run_chain(small_data, PriorConfig(a_h=0.7), McmcConfig(n_iters=60, burn_in=10, thin=5))
    for i, p in enumerate(small_data.patients):
        a = draws.latent[:, i, : p.n_obs]
        assert np.array_equal(a > 0.7, np.broadcast_to(p.outcomes == 1, a.shape))


def test_trig_chain_runs(rng):
    data = generate_outcomes(SENSITIVITY[4], 10, np.arange(1, 21), rng)
    draws = run_chain(data, config=McmcConfig(n_iters=80, burn_in=20, thin=5), kernel="sqexp", mean_form="trig")
    assert draws.theta.shape == (12, 2)
    assert np.all(draws.m == -1)
    assert np.isfinite(draws.ddr(1)).all()


def test_draws_save_load(tmp_path, small_data):
    draws = run_chain(small_data, config=McmcConfig(n_iters=60, burn_in=10, thin=5))
    save_draws(draws, tmp_path / "d.npz")
    back = load_draws(tmp_path / "d.npz")
    np.testing.assert_array_equal(back.beta, draws.beta)
    np.testing.assert_array_equal(back.latent, draws.latent)
    assert back.arms == draws.arms and back.kernel == draws.kernel
    assert np.allclose(back.ddr(1), draws.ddr(1))


# -- diagnostics --------------------------------------------------------------------

def test_ess_iid(rng):
    ess, const = effective_sample_size(rng.standard_normal(1000))
    assert 800 <= ess <= 1200 and not const


def test_ess_ar1(rng):
    n, rho = 20_000, 0.9
    x = np.empty(n)
    x[0] = rng.standard_normal()
    for i in range(1, n):
        x[i] = rho * x[i - 1] + math.sqrt(1 - rho**2) * rng.standard_normal()
    ess, _ = effective_sample_size(x)
    assert ess == pytest.approx(n * (1 - rho) / (1 + rho), rel=0.3)


def test_ess_constant():
    ess, const = effective_sample_size(np.full(50, 2.0))
    assert const and ess == 50


def test_autocorrelation_lag0(rng):
    acf = autocorrelation(rng.standard_normal(500), max_lag=50)
    assert acf.size == 51 and acf[0] == pytest.approx(1.0)


def test_diagnostics_and_trace(tmp_path, small_data):
    draws = run_chain(small_data, config=McmcConfig(n_iters=80, burn_in=10, thin=5))
    diag = diagnostics(draws)
    assert {"theta1", "r", "theta2", "m_1", "ddr_1"} <= set(diag)
    path = tmp_path / "trace.csv"
    write_trace_csv(draws, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,param,value"
    assert len(lines) == 1 + len(draws) * len(diag)


def test_acceptance_rate_in_band():
    data = generate_outcomes(SENSITIVITY[2], 100, np.arange(1, 33), np.random.default_rng(2))
    draws = run_chain(data, config=McmcConfig(n_iters=1500, burn_in=500, thin=10, seed=3), keep_latent=False)
    assert 0.6 <= draws.accept_rate <= 0.95
