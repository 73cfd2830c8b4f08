"""Hierarchical latent-GP model: mean functions, priors, densities and DDR.

The latent process of patient j in arm i is ``a_ij(t) = mu_i(t) + tau_ij(t)``
with a polynomial arm mean ``mu_i`` of random degree and a zero-mean GP
``tau_ij`` shared in covariance across all patients.  Binary outcomes are
``e = 1{a > a_h}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy.optimize import brentq

from .data import DEFAULT_TIME_SCALE, TrialDataset
from .gp import PARAM_NAMES, KernelParams, build_cov

ROOT_IMAG_TOL = 1e-9
# leading coefficients below this fraction of the largest are treated as zero
COEF_REL_TOL = 1e-13
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ArmMeanModel:
    """Polynomial arm mean ``sum_d beta_d t^d`` of degree ``m``."""

    m: int
    beta: np.ndarray

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "beta", beta)
        if self.m < 0:
            raise ValueError("degree must be non-negative")
        if beta.shape != (self.m + 1,):
            raise ValueError(f"degree {self.m} needs {self.m + 1} coefficients, got {beta.size}")

    def __call__(self, t):
        return poly_mean(self, t)


@dataclass(frozen=True)
class TrigMean:
    """Trigonometric mean ``alpha + sin(freq * pi * t)``."""

    alpha: float
    freq: float

    def __call__(self, t):
        t = np.asarray(t, float)
        return self.alpha + np.sin(self.freq * np.pi * t)


MeanModel = Union[ArmMeanModel, TrigMean]


@dataclass(frozen=True)
class PriorConfig:
    """Prior hyperparameters and the response threshold.

    ``theta_prior_means`` / ``theta_prior_vars`` are ordered
    ``(theta1, r, theta2)``; the squared-exponential kernel uses the first two.
    """

    M: int = 5
    mu0: float | tuple = 0.0
    sigma0_sq: float = 100.0
    theta_prior_means: tuple = (0.0, 0.0, 0.0)
    theta_prior_vars: tuple = (100.0, 100.0, 100.0)
    a_h: float = 0.0
    trig_prior_var: float = 100.0

    def __post_init__(self):
        if self.M < 0:
            raise ValueError("M must be >= 0")
        if self.sigma0_sq <= 0 or self.trig_prior_var <= 0:
            raise ValueError("prior variances must be positive")
        if len(self.theta_prior_means) != 3 or len(self.theta_prior_vars) != 3:
            raise ValueError("theta priors need three entries (theta1, r, theta2)")
        if any(v <= 0 for v in self.theta_prior_vars):
            raise ValueError("prior variances must be positive")
        if np.ndim(self.mu0) and len(self.mu0) != self.M + 1:
            raise ValueError(f"mu0 must be a scalar or have M+1={self.M + 1} entries")

    def beta_prior_mean(self, m: int) -> np.ndarray:
        if np.ndim(self.mu0) == 0:
            return np.full(m + 1, float(self.mu0))
        return np.asarray(self.mu0, float)[: m + 1]

    def theta_prior(self, kernel: str) -> tuple[np.ndarray, np.ndarray]:
        k = len(PARAM_NAMES[kernel])
        return np.asarray(self.theta_prior_means[:k], float), np.asarray(self.theta_prior_vars[:k], float)


@dataclass
class LatentState:
    """One MCMC state: latent vectors (dataset order), arm means and kernel parameters."""

    a: list
    means: dict
    kernel: KernelParams = field(default_factory=KernelParams)


def design_matrix(times, m: int) -> np.ndarray:
    """Vandermonde matrix with rows ``(1, t, ..., t^m)``."""
    if m < 0:
        raise ValueError("m must be >= 0")
    return np.vander(np.asarray(times, float), m + 1, increasing=True)


def poly_mean(model: ArmMeanModel, t):
    """Evaluate ``sum_d beta_d t^d``; scalar in, scalar out."""
    value = np.polynomial.polynomial.polyval(np.asarray(t, float), model.beta)
    return float(value) if np.ndim(value) == 0 else value


def mean_values(model: MeanModel, t) -> np.ndarray:
    return np.asarray(model(np.asarray(t, float)), float)


def log_theta_prior(theta_vec, prior: PriorConfig, kernel: str) -> float:
    means, var = prior.theta_prior(kernel)
    d = np.asarray(theta_vec, float) - means
    return float(-0.5 * np.sum(d * d / var + np.log(var) + LOG_2PI))


def grad_log_theta_prior(theta_vec, prior: PriorConfig, kernel: str) -> np.ndarray:
    means, var = prior.theta_prior(kernel)
    return -(np.asarray(theta_vec, float) - means) / var


def log_beta_prior(model: MeanModel, prior: PriorConfig) -> float:
    if isinstance(model, TrigMean):
        v = prior.trig_prior_var
        x = np.array([model.alpha, model.freq])
        return float(-0.5 * np.sum(x * x / v + np.log(v) + LOG_2PI))
    mu0 = prior.beta_prior_mean(model.m)
    d = model.beta - mu0
    v = prior.sigma0_sq
    return float(-0.5 * np.sum(d * d / v + np.log(v) + LOG_2PI))


def constraints_hold(a, outcomes, a_h: float) -> bool:
    a = np.asarray(a, float)
    return bool(np.all((a > a_h) == (np.asarray(outcomes) == 1)))


def log_joint_latent(
    state: LatentState,
    data: TrialDataset,
    prior: PriorConfig,
    kernel: str = "periodic",
) -> float:
    """Unnormalised log joint of latent values, mean parameters and kernel parameters.

    The indicator likelihood contributes 0 when every ``a > a_h`` matches its
    outcome and ``-inf`` otherwise.
    """
    total = 0.0
    for i, p in enumerate(data.patients):
        a = np.asarray(state.a[i], float)
        if not constraints_hold(a, p.outcomes, prior.a_h):
            return -np.inf
        t = data.times(i)
        cov = build_cov(t, kernel, state.kernel)
        z = cov.whiten(a - mean_values(state.means[p.arm], t))
        total += -0.5 * (z @ z + cov.logdet + t.size * LOG_2PI)
    for arm in data.arms:
        model = state.means[arm]
        total += log_beta_prior(model, prior)
        if isinstance(model, ArmMeanModel):
            total -= np.log(prior.M + 1)
    return float(total + log_theta_prior(state.kernel.vector(kernel), prior, kernel))


def energy(
    theta: KernelParams,
    state: LatentState,
    data: TrialDataset,
    prior: PriorConfig,
    kernel: str = "periodic",
) -> float:
    """HMC potential ``E(theta) = 1/2 sum (r' C^-1 r + log|C|) - log P(theta)``."""
    from .batch import PatientBatch

    batch = PatientBatch(data)
    return batch.theta_energy(theta.vector(kernel), batch.residuals(state), prior, kernel, theta.jitter)[0]


def energy_grad(
    theta: KernelParams,
    state: LatentState,
    data: TrialDataset,
    prior: PriorConfig,
    kernel: str = "periodic",
) -> np.ndarray:
    """Gradient of :func:`energy`, ordered ``(theta1, r, theta2)``."""
    from .batch import PatientBatch

    batch = PatientBatch(data)
    return batch.theta_energy(
        theta.vector(kernel), batch.residuals(state), prior, kernel, theta.jitter, grad=True
    )[1]


def _real_roots(coefs: np.ndarray) -> np.ndarray:
    """Real roots of ``sum_d coefs[d] t^d`` (low-to-high order)."""
    c = np.asarray(coefs, float)
    big = np.max(np.abs(c), initial=0.0)
    keep = np.nonzero(np.abs(c) > COEF_REL_TOL * big)[0]
    c = c[: keep[-1] + 1] if keep.size else c[:0]
    deg = c.size - 1
    if deg < 1:
        return np.empty(0)
    if deg == 1:
        return np.array([-c[0] / c[1]])
    if deg == 2:
        c0, b, a = c
        disc = b * b - 4.0 * a * c0
        if disc < 0:
            return np.empty(0)
        q = -0.5 * (b + np.copysign(np.sqrt(disc), b))
        roots = [q / a]
        if q != 0:
            roots.append(c0 / q)
        else:
            roots.append(0.0)
        return np.array(roots)
    roots = np.roots(c[::-1])
    return roots[np.abs(roots.imag) <= ROOT_IMAG_TOL].real


def _measure_above(f: Callable, breaks, horizon_t: float, a_h: float) -> float:
    edges = np.unique(np.concatenate([[0.0, horizon_t], np.clip(breaks, 0.0, horizon_t)]))
    mids = 0.5 * (edges[:-1] + edges[1:])
    widths = np.diff(edges)
    above = np.asarray(f(mids), float) > a_h
    return float(np.sum(widths[above]))


def ddr(
    model: MeanModel,
    a_h: float = 0.0,
    horizon_t: float = 3.5,
    scale: float = DEFAULT_TIME_SCALE,
) -> float:
    """Duration of disease remission in weeks.

    ``scale`` times the Lebesgue measure of ``{t in [0, horizon_t]: mu(t) > a_h}``.
    Polynomial means use exact root-finding; other means bracket sign changes
    on a fine grid and refine with Brent's method.
    """
    if horizon_t <= 0:
        raise ValueError("horizon_t must be positive")
    if isinstance(model, ArmMeanModel):
        coefs = model.beta.copy()
        coefs[0] -= a_h
        roots = _real_roots(coefs)
        roots = roots[(roots > 0.0) & (roots < horizon_t)]
        return scale * _measure_above(model, roots, horizon_t, a_h)
    return scale * measure_above_generic(model, a_h, horizon_t)


def measure_above_generic(f: Callable, a_h: float, horizon_t: float, n_grid: int = 20001) -> float:
    grid = np.linspace(0.0, horizon_t, n_grid)
    g = np.asarray(f(grid), float) - a_h
    roots = []
    for k in np.nonzero(np.sign(g[:-1]) * np.sign(g[1:]) < 0)[0]:
        roots.append(brentq(lambda t: float(f(t)) - a_h, grid[k], grid[k + 1], xtol=1e-13))
    return _measure_above(f, np.array(roots), horizon_t, a_h)


def ddr_grid(model: MeanModel, a_h: float = 0.0, horizon_t: float = 3.5, step: float = 1e-4,
             scale: float = DEFAULT_TIME_SCALE) -> float:
    """Grid-count DDR (midpoint rule); independent of the root-finding path."""
    n = int(round(horizon_t / step))
    mids = (np.arange(n) + 0.5) * (horizon_t / n)
    return scale * float(np.count_nonzero(mean_values(model, mids) > a_h)) * (horizon_t / n)


def ddr_batch(m: np.ndarray, beta: np.ndarray, a_h: float, horizon_t: float,
              scale: float = DEFAULT_TIME_SCALE) -> np.ndarray:
    """DDR for many polynomial draws stored as zero-padded coefficient rows."""
    out = np.empty(len(m))
    for b, (deg, coefs) in enumerate(zip(m, beta)):
        out[b] = ddr(ArmMeanModel(int(deg), coefs[: int(deg) + 1]), a_h, horizon_t, scale)
    return out
