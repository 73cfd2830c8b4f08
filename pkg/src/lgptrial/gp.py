"""Covariance kernels, Cholesky machinery and Gaussian conditionals.

Two stationary kernels are supported:

``sqexp``    theta1^2 exp(-r^2 (tu - tv)^2)
``periodic`` theta1^2 exp(-r^2 sin^2(pi (tu - tv) / theta2))

Both add ``jitter^2`` on the diagonal.  Hyperparameter vectors are ordered
``(theta1, r, theta2)`` for the periodic kernel and ``(theta1, r)`` for the
squared-exponential one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import NumericalError

THETA2_FLOOR = 1e-3
DEFAULT_JITTER = 0.1

KERNELS = ("periodic", "sqexp")
PARAM_NAMES = {"periodic": ("theta1", "r", "theta2"), "sqexp": ("theta1", "r")}


@dataclass(frozen=True)
class KernelParams:
    theta1: float = 1.0
    theta2: float = 3.5
    r: float = 2.0
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if not abs(self.theta2) >= THETA2_FLOOR:
            raise ValueError(f"|theta2| must be >= {THETA2_FLOOR}, got {self.theta2}")
        if not self.jitter > 0:
            raise ValueError("jitter must be positive")

    def vector(self, kernel: str = "periodic") -> np.ndarray:
        if kernel == "periodic":
            return np.array([self.theta1, self.r, self.theta2])
        return np.array([self.theta1, self.r])

    def with_vector(self, values, kernel: str = "periodic") -> KernelParams:
        values = np.asarray(values, dtype=float)
        if kernel == "periodic":
            return KernelParams(float(values[0]), float(values[2]), float(values[1]), self.jitter)
        return KernelParams(float(values[0]), self.theta2, float(values[1]), self.jitter)


def _check_kernel(kernel: str) -> None:
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")


def kernel_periodic(t_u: float, t_v: float, p: KernelParams) -> float:
    s = np.sin(np.pi * (t_u - t_v) / p.theta2)
    value = p.theta1**2 * np.exp(-(p.r**2) * s * s)
    if t_u == t_v:
        value += p.jitter**2
    return float(value)


def kernel_sqexp(t_u: float, t_v: float, p: KernelParams) -> float:
    d = t_u - t_v
    value = p.theta1**2 * np.exp(-(p.r**2) * d * d)
    if t_u == t_v:
        value += p.jitter**2
    return float(value)


def kernel_grad_periodic(t_u: float, t_v: float, p: KernelParams) -> tuple[float, float, float]:
    """Partials ``(dC/dtheta1, dC/dr, dC/dtheta2)`` of the periodic kernel."""
    arg = np.pi * (t_u - t_v) / p.theta2
    s, c = np.sin(arg), np.cos(arg)
    ex = np.exp(-(p.r**2) * s * s)
    d_theta1 = 2.0 * p.theta1 * ex
    d_r = -2.0 * p.r * s * s * p.theta1**2 * ex
    d_theta2 = 2.0 * p.r**2 * p.theta1**2 * ex * s * c * np.pi * (t_u - t_v) / p.theta2**2
    return float(d_theta1), float(d_r), float(d_theta2)


def kernel_grad_sqexp(t_u: float, t_v: float, p: KernelParams) -> tuple[float, float]:
    d = t_u - t_v
    ex = np.exp(-(p.r**2) * d * d)
    return float(2.0 * p.theta1 * ex), float(-2.0 * p.r * d * d * p.theta1**2 * ex)


def cross_cov(t1, t2, kernel: str, p: KernelParams) -> np.ndarray:
    """Noise-free covariance between two sets of times (no jitter)."""
    _check_kernel(kernel)
    d = np.subtract.outer(np.asarray(t1, float), np.asarray(t2, float))
    if kernel == "periodic":
        s = np.sin(np.pi * d / p.theta2)
        return p.theta1**2 * np.exp(-(p.r**2) * s * s)
    return p.theta1**2 * np.exp(-(p.r**2) * d * d)


def cov_values(times, kernel: str, p: KernelParams) -> np.ndarray:
    """Covariance matrix of ``times`` with ``jitter^2`` on the diagonal."""
    times = np.asarray(times, float)
    out = cross_cov(times, times, kernel, p)
    out[np.diag_indices_from(out)] += p.jitter**2
    return out


def cov_grads(times, kernel: str, p: KernelParams) -> np.ndarray:
    """Stack of ``dC/dparam`` matrices, shape ``(n_params, n, n)``."""
    _check_kernel(kernel)
    times = np.asarray(times, float)
    d = np.subtract.outer(times, times)
    if kernel == "periodic":
        arg = np.pi * d / p.theta2
        s, c = np.sin(arg), np.cos(arg)
        ex = np.exp(-(p.r**2) * s * s)
        return np.stack(
            [
                2.0 * p.theta1 * ex,
                -2.0 * p.r * s * s * p.theta1**2 * ex,
                2.0 * p.r**2 * p.theta1**2 * ex * s * c * np.pi * d / p.theta2**2,
            ]
        )
    ex = np.exp(-(p.r**2) * d * d)
    return np.stack([2.0 * p.theta1 * ex, -2.0 * p.r * d * d * p.theta1**2 * ex])


def cholesky_lower(values: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; reports the first non-positive leading minor on failure."""
    chol, info = lapack.dpotrf(values, lower=1, clean=1)
    if info > 0:
        raise NumericalError(
            f"covariance matrix is not positive definite (leading minor of order {info})",
            minor=int(info),
        )
    if info < 0:
        raise NumericalError(f"dpotrf: illegal argument {-info}")
    return chol


@dataclass(frozen=True)
class CovMatrix:
    values: np.ndarray
    chol: np.ndarray
    logdet: float

    @classmethod
    def from_values(cls, values: np.ndarray) -> CovMatrix:
        values = np.asarray(values, float)
        chol = cholesky_lower(values)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        return cls(values, chol, logdet)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """``C^{-1} b`` via two triangular solves."""
        y = solve_triangular(self.chol, b, lower=True, check_finite=False)
        return solve_triangular(self.chol, y, lower=True, trans="T", check_finite=False)

    def whiten(self, b: np.ndarray) -> np.ndarray:
        """``L^{-1} b``; the squared norm of the result is the Mahalanobis quadratic form."""
        return solve_triangular(self.chol, b, lower=True, check_finite=False)


def build_cov(times, kernel: str, p: KernelParams) -> CovMatrix:
    times = np.asarray(times, float)
    if times.size == 0:
        raise ValueError("times must be nonempty")
    return CovMatrix.from_values(cov_values(times, kernel, p))


def mvn_sample(mean, cov: CovMatrix, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``mean + L z`` with ``z`` standard normal; ``size`` adds a leading batch axis."""
    mean = np.asarray(mean, float)
    if mean.shape[-1] != cov.n:
        raise ValueError(f"mean has length {mean.shape[-1]}, covariance is {cov.n}x{cov.n}")
    if size is None:
        return mean + cov.chol @ rng.standard_normal(cov.n)
    z = rng.standard_normal((size, cov.n))
    return mean + z @ cov.chol.T


def gp_conditional(
    obs_times,
    obs_values,
    new_times,
    mean_at: Callable[[np.ndarray], np.ndarray],
    kernel: str,
    p: KernelParams,
) -> tuple[np.ndarray, CovMatrix]:
    """Condition a GP with mean ``mean_at`` on observed latent values.

    ``obs_values`` may be 2-D (one row per series sharing ``obs_times``);
    the conditional mean then has one row per series while the conditional
    covariance is shared.  With no observations the prior is returned.
    """
    obs_times = np.asarray(obs_times, float)
    new_times = np.asarray(new_times, float)
    mu_new = np.asarray(mean_at(new_times), float)
    prior_cov = cov_values(new_times, kernel, p)
    if obs_times.size == 0:
        return mu_new, CovMatrix.from_values(prior_cov)
    c_oo = build_cov(obs_times, kernel, p)
    c_on = cross_cov(obs_times, new_times, kernel, p)
    resid = np.asarray(obs_values, float) - np.asarray(mean_at(obs_times), float)
    w = c_oo.whiten(c_on)  # L^{-1} C_on
    z = c_oo.whiten(resid.T)  # L^{-1} (a - mu)
    cond_mean = mu_new + (w.T @ z).T
    cond_cov = prior_cov - w.T @ w
    cond_cov = 0.5 * (cond_cov + cond_cov.T)
    return cond_mean, CovMatrix.from_values(cond_cov)
