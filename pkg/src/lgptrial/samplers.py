"""MCMC for the latent GP model.

One sweep updates, in order: every latent vector by a Gibbs cycle of
univariate truncated normals; each arm's polynomial degree (with the
coefficients integrated out) followed by its coefficients; and the kernel
hyperparameters by Hybrid Monte Carlo.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import ndtr, ndtri

from .batch import PatientBatch
from .data import TrialDataset
from .errors import NumericalError
from .gp import PARAM_NAMES, THETA2_FLOOR, KernelParams
from .model import (
    ArmMeanModel,
    LatentState,
    PriorConfig,
    TrigMean,
    ddr,
    design_matrix,
)

log = logging.getLogger(__name__)

TAIL_CUTOFF = 5.0
ADAPT_WINDOW = 10
ADAPT_LOW, ADAPT_HIGH = 0.6, 0.9


@dataclass(frozen=True)
class McmcConfig:
    n_iters: int = 10000
    burn_in: int = 2000
    thin: int = 10
    hmc_steps: int = 20
    hmc_eps: float = 0.01
    seed: int = 0
    adapt: bool = True

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iters:
            raise ValueError("need 0 <= burn_in < n_iters")
        if self.thin < 1 or self.hmc_steps < 1:
            raise ValueError("thin and hmc_steps must be >= 1")
        if self.hmc_eps < 0:
            raise ValueError("hmc_eps must be non-negative")

    @property
    def n_retained(self) -> int:
        return (self.n_iters - self.burn_in) // self.thin

    def scaled(self, n_iters: int) -> McmcConfig:
        """Same proportions (burn-in fraction, thinning) at a different length."""
        burn = int(round(self.burn_in * n_iters / self.n_iters))
        return McmcConfig(n_iters, burn, self.thin, self.hmc_steps, self.hmc_eps, self.seed, self.adapt)


# ---------------------------------------------------------------------------
# truncated normal
# ---------------------------------------------------------------------------


def _tail_draws(lo: np.ndarray, hi: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Standard normal on (lo, hi) with lo > TAIL_CUTOFF, by exponential-proposal rejection."""
    out = np.empty(lo.shape)
    pending = np.arange(lo.size)
    lam = 0.5 * (lo + np.sqrt(lo * lo + 4.0))
    while pending.size:
        l, h, lm = lo[pending], hi[pending], lam[pending]
        z = l + rng.exponential(1.0 / lm)
        u = rng.random(pending.size)
        ok = (u <= np.exp(-0.5 * (z - lm) ** 2)) & (z < h)
        out[pending[ok]] = z[ok]
        pending = pending[~ok]
    return out


def truncnorm_std(lo, hi, rng: np.random.Generator) -> np.ndarray:
    """Vectorised draws from N(0, 1) restricted to ``(lo, hi)``."""
    lo, hi = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float))
    lo, hi = lo.ravel(), hi.ravel()
    out = np.empty(lo.shape)
    upper_tail = lo > TAIL_CUTOFF
    lower_tail = hi < -TAIL_CUTOFF
    bulk = ~(upper_tail | lower_tail)
    if upper_tail.any():
        out[upper_tail] = _tail_draws(lo[upper_tail], hi[upper_tail], rng)
    if lower_tail.any():
        out[lower_tail] = -_tail_draws(-hi[lower_tail], -lo[lower_tail], rng)
    if bulk.any():
        l, h = lo[bulk], hi[bulk]
        u = 1.0 - rng.random(l.size)  # (0, 1]
        right = l >= 0
        x = np.empty(l.size)
        # work in the survival function on the right half for accuracy
        s_lo, s_hi = ndtr(-l[right]), ndtr(-h[right])
        x[right] = -ndtri(s_hi + u[right] * (s_lo - s_hi))
        c_lo, c_hi = ndtr(l[~right]), ndtr(h[~right])
        x[~right] = ndtri(c_hi - u[~right] * (c_hi - c_lo))
        out[bulk] = np.clip(x, l, h)
    return out


def sample_truncnorm(mu: float, sigma: float, lower: float, upper: float,
                     rng: np.random.Generator) -> float:
    """One exact draw from N(mu, sigma^2) truncated to (lower, upper)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not lower < upper:
        raise ValueError("need lower < upper")
    x = truncnorm_std((lower - mu) / sigma, (upper - mu) / sigma, rng)[0]
    return float(mu + sigma * x)


# ---------------------------------------------------------------------------
# latent Gibbs cycle
# ---------------------------------------------------------------------------


def _gibbs_block(blk, factor, a, mu, a_h, rng, active):
    P = factor.precisions()
    r = (a - mu) * blk.mask
    sidx = blk.sizes - 1
    for k in range(blk.K):
        act = active[k]
        rows = P[sidx[act], k, :]
        rk = r[act]
        pkk = rows[:, k]
        s = np.einsum("ij,ij->i", rows, rk) - pkk * rk[:, k]
        cm = -s / pkk
        sd = 1.0 / np.sqrt(pkk)
        bound = (a_h - mu[act, k] - cm) / sd
        up = blk.upper[act, k]
        lo = np.where(up, bound, -np.inf)
        hi = np.where(up, np.inf, bound)
        r[act, k] = cm + sd * truncnorm_std(lo, hi, rng)
    new = (mu + r) * blk.mask
    # floating-point guard: keep a > a_h strictly for responders
    bad = blk.upper & (new <= a_h)
    if bad.any():
        new[bad] = np.nextafter(a_h, np.inf)
    bad = blk.mask & ~blk.upper & (new > a_h)
    if bad.any():
        new[bad] = a_h
    a[...] = new


def _active_sets(batch: PatientBatch) -> list[list[np.ndarray]]:
    return [[np.nonzero(blk.sizes > k)[0] for k in range(blk.K)] for blk in batch.blocks]


def gibbs_sweep(batch, factors, a_pad, mu_pad, a_h, rng, active=None):
    """Update every latent vector in place by one Gibbs cycle through its components."""
    active = active or _active_sets(batch)
    for blk, f, a, mu, act in zip(batch.blocks, factors, a_pad, mu_pad, active):
        _gibbs_block(blk, f, a, mu, a_h, rng, act)


def gibbs_update_latent(state: LatentState, patient: int, data: TrialDataset,
                        rng: np.random.Generator, a_h: float = 0.0,
                        kernel: str = "periodic") -> np.ndarray:
    """Gibbs cycle ``k = 1..K`` for one patient; returns the new latent vector."""
    p = data.patients[patient]
    sub = TrialDataset((p,), data.horizon_weeks, data.time_scale)
    batch = PatientBatch(sub)
    factors = batch.factors(kernel, state.kernel)
    a_pad = batch.pad([state.a[patient]])
    mu_pad = batch.mean_arrays({p.arm: state.means[p.arm]})
    gibbs_sweep(batch, factors, a_pad, mu_pad, a_h, rng)
    return batch.unpad(a_pad)[0]


# ---------------------------------------------------------------------------
# degree and coefficients
# ---------------------------------------------------------------------------


def degree_log_weights(Q: np.ndarray, b: np.ndarray, prior: PriorConfig) -> np.ndarray:
    """Unnormalised log posterior of each degree ``h = 0..M`` with coefficients integrated out."""
    M = prior.M
    s2 = prior.sigma0_sq
    out = np.empty(M + 1)
    for h in range(M + 1):
        mu0 = prior.beta_prior_mean(h)
        prec = Q[: h + 1, : h + 1] + np.eye(h + 1) / s2
        try:
            L = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            out[h] = -np.inf
            continue
        bh = b[: h + 1] + mu0 / s2
        z = np.linalg.solve(L, bh)
        out[h] = (
            -np.log(M + 1)
            - np.sum(np.log(np.diag(L)))  # 1/2 log|A_h|
            - 0.5 * (h + 1) * np.log(s2)
            + 0.5 * z @ z
            - 0.5 * mu0 @ mu0 / s2
        )
    return out


def _normalise_log(w: np.ndarray) -> np.ndarray:
    top = np.max(w)
    if not np.isfinite(top):
        raise NumericalError("all degree weights underflowed")
    p = np.exp(w - top)
    return p / p.sum()


def draw_beta(Q: np.ndarray, b: np.ndarray, m: int, prior: PriorConfig,
              rng: np.random.Generator) -> np.ndarray:
    """Exact draw from N(A b, A) with ``A = (Q_m + I/sigma0^2)^-1``."""
    s2 = prior.sigma0_sq
    prec = Q[: m + 1, : m + 1] + np.eye(m + 1) / s2
    bh = b[: m + 1] + prior.beta_prior_mean(m) / s2
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("coefficient precision matrix is not positive definite") from exc
    z = np.linalg.solve(L, bh)
    mean = np.linalg.solve(L.T, z)
    return mean + np.linalg.solve(L.T, rng.standard_normal(m + 1))


def _arm_stats(state, data, prior, arm, kernel):
    batch = PatientBatch(data)
    factors = batch.factors(kernel, state.kernel)
    return batch.log_marginal_terms(factors, batch.pad(state.a), arm, prior.M)


def sample_degree(arm: int, state: LatentState, data: TrialDataset, prior: PriorConfig,
                  rng: np.random.Generator, kernel: str = "periodic") -> int:
    if data.n_patients(arm) == 0:
        Q, b = np.zeros((prior.M + 1, prior.M + 1)), np.zeros(prior.M + 1)
    else:
        Q, b = _arm_stats(state, data, prior, arm, kernel)
    w = _normalise_log(degree_log_weights(Q, b, prior))
    return int(rng.choice(prior.M + 1, p=w))


def sample_beta(arm: int, state: LatentState, data: TrialDataset, prior: PriorConfig,
                rng: np.random.Generator, kernel: str = "periodic") -> np.ndarray:
    m = state.means[arm].m
    if data is None or data.n_patients(arm) == 0:
        Q, b = np.zeros((prior.M + 1, prior.M + 1)), np.zeros(prior.M + 1)
    else:
        Q, b = _arm_stats(state, data, prior, arm, kernel)
    return draw_beta(Q, b, m, prior, rng)


# ---------------------------------------------------------------------------
# Hybrid Monte Carlo
# ---------------------------------------------------------------------------


def leapfrog(theta, w, grad_fn: Callable, eps: float, n_steps: int, grad0=None, valid=None):
    """``n_steps`` leapfrog iterations of size ``eps``.

    Returns ``(theta, w, grad_at_theta)`` or ``None`` when ``valid`` rejects
    an intermediate position.
    """
    g = grad_fn(theta) if grad0 is None else grad0
    for _ in range(n_steps):
        w = w - 0.5 * eps * g
        theta = theta + eps * w
        if valid is not None and not valid(theta):
            return None
        g = grad_fn(theta)
        w = w - 0.5 * eps * g
    return theta, w, g


@dataclass
class HmcResult:
    theta: np.ndarray
    accepted: bool
    accept_prob: float


def hmc_step(theta, energy_and_grad: Callable, eps0: float, n_steps: int,
             rng: np.random.Generator, valid: Callable | None = None, current=None) -> HmcResult:
    """One Hybrid Monte Carlo transition with a random trajectory direction.

    ``energy_and_grad(theta)`` returns ``(E, dE/dtheta)``; ``current`` may
    carry that pair for the starting point.  Non-finite energies and
    positions failing ``valid`` are rejections.
    """
    theta = np.asarray(theta, float)
    w0 = rng.standard_normal(theta.shape)
    lam = 1.0 if rng.random() < 0.5 else -1.0
    E0, g0 = energy_and_grad(theta) if current is None else current
    H0 = E0 + 0.5 * np.sum(w0 * w0)
    cache = {}

    def grad_fn(x):
        E, g = energy_and_grad(x)
        cache["E"] = E
        if not (np.isfinite(E) and np.all(np.isfinite(g))):
            raise FloatingPointError
        return g

    try:
        out = leapfrog(theta, w0, grad_fn, lam * eps0, n_steps, grad0=g0, valid=valid)
    except (NumericalError, FloatingPointError, ValueError):
        out = None
    if out is None:
        return HmcResult(theta, False, 0.0)
    theta_new, w_new, _ = out
    E1 = cache.get("E", E0)
    H1 = E1 + 0.5 * np.sum(w_new * w_new)
    dH = H1 - H0
    prob = 1.0 if dH <= 0 else float(np.exp(-dH))
    if not np.isfinite(dH):
        prob = 0.0
    if rng.random() < prob:
        return HmcResult(theta_new, True, prob)
    return HmcResult(theta, False, prob)


def _theta_valid(kernel: str):
    if kernel != "periodic":
        return None
    return lambda x: abs(x[2]) >= THETA2_FLOOR


def hmc_update_theta(state: LatentState, data: TrialDataset, prior: PriorConfig,
                     config: McmcConfig, rng: np.random.Generator,
                     kernel: str = "periodic") -> tuple[KernelParams, bool]:
    batch = PatientBatch(data)
    resid = batch.residuals(state)
    jitter = state.kernel.jitter

    def fn(x):
        return batch.theta_energy(x, resid, prior, kernel, jitter, grad=True)

    res = hmc_step(state.kernel.vector(kernel), fn, config.hmc_eps, config.hmc_steps, rng,
                   valid=_theta_valid(kernel))
    return state.kernel.with_vector(res.theta, kernel), res.accepted


class StepSizeAdapter:
    """Multiplicative step-size tuning over a sliding window of acceptance probabilities."""

    def __init__(self, eps: float, window: int = ADAPT_WINDOW):
        self.eps = eps
        self.window = window
        self.history: list[float] = []

    def update(self, prob: float) -> None:
        self.history.append(prob)
        recent = np.mean(self.history[-self.window:])
        if recent > ADAPT_HIGH:
            self.eps *= 1.1
        elif recent < ADAPT_LOW:
            self.eps *= 0.9


# ---------------------------------------------------------------------------
# chain
# ---------------------------------------------------------------------------


@dataclass
class PosteriorDraws:
    """Retained MCMC draws.

    ``beta`` rows are zero-padded to ``M + 1`` so a row always evaluates to
    the drawn polynomial.  For the trigonometric mean, ``beta[..., :2]`` holds
    ``(alpha, freq)`` and ``m`` is -1.
    """

    arms: tuple
    kernel: str
    mean_form: str
    m: np.ndarray  # (B, n_arms)
    beta: np.ndarray  # (B, n_arms, M+1)
    theta: np.ndarray  # (B, n_params)
    latent: np.ndarray | None  # (B, n_patients, K_max), NaN padded
    iterations: np.ndarray
    accept_rate: float
    hmc_eps: float
    jitter: float
    a_h: float
    horizon_t: float
    time_scale: float
    M: int
    mean_accept_rate: float = float("nan")
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return self.m.shape[0]

    @property
    def param_names(self) -> tuple:
        return PARAM_NAMES[self.kernel]

    def arm_index(self, arm: int) -> int:
        return self.arms.index(arm)

    def mean_model(self, b: int, arm: int):
        k = self.arm_index(arm)
        if self.mean_form == "trig":
            return TrigMean(float(self.beta[b, k, 0]), float(self.beta[b, k, 1]))
        m = int(self.m[b, k])
        return ArmMeanModel(m, self.beta[b, k, : m + 1])

    def kernel_params(self, b: int) -> KernelParams:
        return KernelParams(jitter=self.jitter).with_vector(self.theta[b], self.kernel)

    def latent_vector(self, b: int, patient: int) -> np.ndarray:
        if self.latent is None:
            raise ValueError("latent draws were not retained")
        row = self.latent[b, patient]
        return row[~np.isnan(row)]

    def ddr(self, arm: int) -> np.ndarray:
        return np.array([ddr(self.mean_model(b, arm), self.a_h, self.horizon_t, self.time_scale)
                         for b in range(len(self))])


def _init_state(batch, data, prior, mean_form, rng):
    a_h = prior.a_h
    a_pad = [np.where(blk.upper, a_h + 0.5, a_h - 0.5) * blk.mask for blk in batch.blocks]
    a_list = batch.unpad(a_pad)
    params = {}
    for arm in data.arms:
        ids = [i for i, p in enumerate(data.patients) if p.arm == arm]
        t = np.concatenate([data.times(i) for i in ids])
        y = np.concatenate([a_list[i] for i in ids])
        if mean_form == "trig":
            params[arm] = _init_trig(t, y)
        else:
            X = design_matrix(t, 1)
            params[arm] = np.linalg.lstsq(X, y, rcond=None)[0]
    return a_pad, params


def _init_trig(t, y):
    best = None
    for f in np.arange(0.1, 3.0001, 0.01):
        s = np.sin(f * np.pi * t)
        alpha = float(np.mean(y - s))
        sse = float(np.sum((y - alpha - s) ** 2))
        if best is None or sse < best[0]:
            best = (sse, alpha, f)
    return np.array([best[1], best[2]])


def run_chain(
    data: TrialDataset,
    prior: PriorConfig | None = None,
    config: McmcConfig | None = None,
    kernel: str = "periodic",
    mean_form: str = "poly",
    keep_latent: bool = True,
    init_theta: KernelParams | None = None,
) -> PosteriorDraws:
    """Run one chain and return post-burn-in, thinned draws.

    Deterministic given ``config.seed``.  Numerical failures are re-raised
    as :class:`NumericalError` carrying the iteration index.
    """
    prior = prior or PriorConfig()
    config = config or McmcConfig()
    if mean_form not in ("poly", "trig"):
        raise ValueError("mean_form must be 'poly' or 'trig'")
    rng = np.random.default_rng(config.seed)
    batch = PatientBatch(data)
    active = _active_sets(batch)
    arms = data.arms
    M = prior.M
    a_h = prior.a_h
    theta_init = init_theta or KernelParams(1.0, 1.0, 1.0)
    jitter = theta_init.jitter
    theta = theta_init.vector(kernel)
    valid = _theta_valid(kernel)

    a_pad, init = _init_state(batch, data, prior, mean_form, rng)
    m = {arm: 1 for arm in arms}
    beta = {}
    for arm in arms:
        row = np.zeros(max(M, 1) + 1)
        row[: init[arm].size] = init[arm]
        beta[arm] = row

    def means():
        if mean_form == "trig":
            return {arm: TrigMean(beta[arm][0], beta[arm][1]) for arm in arms}
        return {arm: ArmMeanModel(m[arm], beta[arm][: m[arm] + 1]) for arm in arms}

    adapter = StepSizeAdapter(config.hmc_eps)
    trig_adapters = {arm: StepSizeAdapter(config.hmc_eps) for arm in arms}

    n_keep = config.n_retained
    width = beta[arms[0]].size
    out_m = np.zeros((n_keep, len(arms)), dtype=int)
    out_beta = np.zeros((n_keep, len(arms), width))
    out_theta = np.zeros((n_keep, theta.size))
    kmax = max(blk.K for blk in batch.blocks)
    out_latent = np.full((n_keep, batch.n, kmax), np.nan) if keep_latent else None
    out_iter = np.zeros(n_keep, dtype=int)
    accepted = 0
    post_probs = []
    kept = 0

    for it in range(config.n_iters):
        try:
            params = KernelParams(jitter=jitter).with_vector(theta, kernel)
            factors = batch.factors(kernel, params)
            mu_pad = batch.mean_arrays(means())
            gibbs_sweep(batch, factors, a_pad, mu_pad, a_h, rng, active)

            if mean_form == "poly":
                for arm in arms:
                    Q, b = batch.log_marginal_terms(factors, a_pad, arm, M)
                    w = _normalise_log(degree_log_weights(Q, b, prior))
                    m[arm] = int(rng.choice(M + 1, p=w))
                    beta[arm][:] = 0.0
                    beta[arm][: m[arm] + 1] = draw_beta(Q, b, m[arm], prior, rng)
            else:
                for arm in arms:
                    res = _trig_hmc(batch, factors, a_pad, arm, beta[arm][:2], prior,
                                    trig_adapters[arm].eps, config.hmc_steps, rng)
                    beta[arm][:2] = res.theta
                    if config.adapt and it < config.burn_in:
                        trig_adapters[arm].update(res.accept_prob)

            resid = [a - mu for a, mu in zip(a_pad, batch.mean_arrays(means()))]

            def fn(x):
                return batch.theta_energy(x, resid, prior, kernel, jitter, grad=True)

            res = hmc_step(theta, fn, adapter.eps, config.hmc_steps, rng, valid=valid)
            theta = res.theta
        except NumericalError as exc:
            raise NumericalError(f"iteration {it}: {exc}", minor=exc.minor, iteration=it) from exc

        if it < config.burn_in:
            if config.adapt:
                adapter.update(res.accept_prob)
        else:
            accepted += res.accepted
            post_probs.append(res.accept_prob)
            if (it - config.burn_in + 1) % config.thin == 0 and kept < n_keep:
                for k, arm in enumerate(arms):
                    out_m[kept, k] = m[arm] if mean_form == "poly" else -1
                    out_beta[kept, k] = beta[arm]
                out_theta[kept] = theta
                if keep_latent:
                    out_latent[kept] = batch.to_dense(a_pad)
                out_iter[kept] = it
                kept += 1

    n_post = config.n_iters - config.burn_in
    return PosteriorDraws(
        arms=arms,
        kernel=kernel,
        mean_form=mean_form,
        m=out_m,
        beta=out_beta,
        theta=out_theta,
        latent=out_latent,
        iterations=out_iter,
        accept_rate=accepted / n_post if n_post else float("nan"),
        hmc_eps=adapter.eps,
        jitter=jitter,
        a_h=a_h,
        horizon_t=data.horizon_t,
        time_scale=data.time_scale,
        M=M,
        mean_accept_rate=float(np.mean(post_probs)) if post_probs else float("nan"),
    )


def _trig_hmc(batch, factors, a_pad, arm, params, prior, eps, n_steps, rng):
    """HMC update of ``(alpha, freq)`` for one arm's trigonometric mean."""
    v = prior.trig_prior_var

    def fn(x):
        alpha, freq = x
        E = 0.5 * float(x @ x) / v
        g = np.asarray(x, float) / v
        for blk, f, a in zip(batch.blocks, factors, a_pad):
            rows = blk.arm == arm
            if not rows.any():
                continue
            t = blk.times[rows]
            mask = blk.mask[rows]
            ang = freq * np.pi * t
            r = (a[rows] - alpha - np.sin(ang)) * mask
            z = (r @ f.linv.T) * mask
            sol = (z @ f.linv) * mask
            E += 0.5 * np.sum(z * z)
            g[0] -= np.sum(sol)
            g[1] -= np.sum(sol * np.pi * t * np.cos(ang) * mask)
        return E, g

    return hmc_step(np.asarray(params, float), fn, eps, n_steps, rng)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def autocorrelation(x, max_lag: int = 50) -> np.ndarray:
    x = np.asarray(x, float)
    n = x.size
    d = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(d, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n]
    if acov[0] <= 0:
        return np.ones(min(max_lag, n - 1) + 1)
    return acov[: min(max_lag, n - 1) + 1] / acov[0]


def effective_sample_size(x) -> tuple[float, bool]:
    """ESS by Geyer's initial positive sequence; returns ``(ess, constant_flag)``."""
    x = np.asarray(x, float)
    n = x.size
    if n < 2 or np.ptp(x) == 0:
        return float(n), True
    rho = autocorrelation(x, n - 1)
    tau = -1.0
    for k in range(0, rho.size - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    tau = max(tau, 1.0 / n)
    return float(min(n / tau, n * np.log10(n))), False


@dataclass(frozen=True)
class Diagnostic:
    ess: float
    acf: np.ndarray
    constant: bool


def trace_series(draws: PosteriorDraws) -> dict[str, np.ndarray]:
    series = {name: draws.theta[:, k] for k, name in enumerate(draws.param_names)}
    for k, arm in enumerate(draws.arms):
        if draws.mean_form == "poly":
            series[f"m_{arm}"] = draws.m[:, k].astype(float)
        else:
            series[f"alpha_{arm}"] = draws.beta[:, k, 0]
            series[f"freq_{arm}"] = draws.beta[:, k, 1]
        series[f"ddr_{arm}"] = draws.ddr(arm)
    return series


def diagnostics(draws: PosteriorDraws, max_lag: int = 50) -> dict[str, Diagnostic]:
    if len(draws) < 10:
        raise ValueError("need at least 10 retained draws")
    out = {}
    for name, x in trace_series(draws).items():
        ess, const = effective_sample_size(x)
        out[name] = Diagnostic(ess, autocorrelation(x, max_lag), const)
    return out


def write_trace_csv(draws: PosteriorDraws, path: str | Path) -> None:
    series = trace_series(draws)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("iter", "param", "value"))
        for b, it in enumerate(draws.iterations):
            for name, x in series.items():
                writer.writerow((int(it), name, repr(float(x[b]))))


_ARRAY_FIELDS = ("m", "beta", "theta", "latent", "iterations")


def save_draws(draws: PosteriorDraws, path: str | Path) -> None:
    """Write draws to a compressed ``.npz`` archive."""
    meta = {k: getattr(draws, k) for k in (
        "arms", "kernel", "mean_form", "accept_rate", "hmc_eps", "jitter", "a_h",
        "horizon_t", "time_scale", "M", "mean_accept_rate")}
    arrays = {k: getattr(draws, k) for k in _ARRAY_FIELDS if getattr(draws, k) is not None}
    with open(path, "wb") as fh:
        np.savez_compressed(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_draws(path: str | Path) -> PosteriorDraws:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        meta["arms"] = tuple(meta["arms"])
        arrays = {k: (z[k] if k in z.files else None) for k in _ARRAY_FIELDS}
    return PosteriorDraws(**arrays, **meta)
