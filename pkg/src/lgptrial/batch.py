"""Vectorised per-patient linear algebra for the latent GP.

Both kernels are stationary, so a patient's covariance depends only on the
time offsets ``t - t[0]``.  Patients whose offsets are a prefix of a common
base grid share one Cholesky factor ``L`` of the base covariance: the factor
of a leading principal block is the leading block of ``L``, and so is the
inverse ``L^{-1}``.  Zero-padding residuals beyond a patient's own length
therefore lets every patient in a block be whitened with one matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

from .data import TrialDataset
from .errors import NumericalError
from .gp import KernelParams
from .model import LatentState, PriorConfig, grad_log_theta_prior, log_theta_prior

_KEY_DECIMALS = 9


@dataclass
class Block:
    base: np.ndarray  # (K,) offsets from the first observation
    idx: np.ndarray  # patient positions in the dataset
    sizes: np.ndarray  # observations per patient
    mask: np.ndarray  # (n, K) bool
    times: np.ndarray  # (n, K) absolute model times, 0 beyond size
    upper: np.ndarray  # (n, K) bool, outcome == 1
    arm: np.ndarray  # (n,)
    count_ge: np.ndarray  # (K,) patients with size > k

    def __post_init__(self):
        self.diff = np.subtract.outer(self.base, self.base)

    @property
    def K(self) -> int:
        return self.base.size


@dataclass
class BlockFactor:
    chol: np.ndarray
    linv: np.ndarray
    logdiag: np.ndarray
    _prec: np.ndarray | None = None

    def precisions(self) -> np.ndarray:
        """``P[s-1]`` is the inverse covariance of the first ``s`` points, zero-padded."""
        if self._prec is None:
            outer = self.linv[:, :, None] * self.linv[:, None, :]
            self._prec = np.cumsum(outer, axis=0)
        return self._prec


def _kernel_terms(diff, kernel, params, grad):
    """Covariance (with jitter) and optionally the stacked parameter derivatives."""
    if kernel == "periodic":
        arg = (np.pi / params.theta2) * diff
        s = np.sin(arg)
        s2 = s * s
        ex = np.exp(-(params.r**2) * s2)
    else:
        s2 = diff * diff
        ex = np.exp(-(params.r**2) * s2)
    k = params.theta1**2 * ex
    C = k.copy()
    C.flat[:: C.shape[0] + 1] += params.jitter**2
    if not grad:
        return C, None
    n_par = 3 if kernel == "periodic" else 2
    dC = np.empty((n_par,) + C.shape)
    dC[0] = 2.0 * params.theta1 * ex
    dC[1] = (-2.0 * params.r) * s2 * k
    if kernel == "periodic":
        # s * cos = sin(2 arg) / 2
        dC[2] = (params.r**2 * np.pi / params.theta2**2) * k * np.sin(2.0 * arg) * diff
    return C, dC


def _factor(C):
    chol, info = lapack.dpotrf(C, lower=1, clean=1)
    if info != 0:
        raise NumericalError(
            f"covariance matrix is not positive definite (leading minor of order {info})",
            minor=int(info),
        )
    linv, info = lapack.dtrtri(chol, lower=1)
    if info != 0:
        raise NumericalError("singular Cholesky factor")
    return BlockFactor(chol, linv, np.log(np.diag(chol)))


def factor_block(block: Block, kernel: str, params: KernelParams) -> BlockFactor:
    C, _ = _kernel_terms(block.diff, kernel, params, grad=False)
    return _factor(C)


class PatientBatch:
    """Block layout of a dataset plus the batched density primitives."""

    def __init__(self, data: TrialDataset):
        self.data = data
        self.n = len(data)
        rel = []
        for i in range(self.n):
            t = data.times(i)
            rel.append(np.round(t - t[0], _KEY_DECIMALS))
        keys = {}
        for i, r in enumerate(rel):
            keys.setdefault(tuple(r), []).append(i)
        bases: list[np.ndarray] = []
        members: list[list[int]] = []
        for key in sorted(keys, key=len, reverse=True):
            k = np.array(key)
            for b, base in enumerate(bases):
                if base.size >= k.size and np.array_equal(base[: k.size], k):
                    members[b].extend(keys[key])
                    break
            else:
                bases.append(k)
                members.append(list(keys[key]))
        self.blocks: list[Block] = []
        self.where = np.empty((self.n, 2), dtype=int)
        for b, (base, idx) in enumerate(zip(bases, members)):
            idx = np.array(sorted(idx))
            K = base.size
            sizes = np.array([data.patients[i].n_obs for i in idx])
            mask = np.arange(K)[None, :] < sizes[:, None]
            times = np.zeros((idx.size, K))
            upper = np.zeros((idx.size, K), dtype=bool)
            for row, i in enumerate(idx):
                n = sizes[row]
                times[row, :n] = data.times(i)
                upper[row, :n] = data.patients[i].outcomes == 1
                self.where[i] = (b, row)
            arm = np.array([data.patients[i].arm for i in idx])
            count_ge = (sizes[:, None] > np.arange(K)[None, :]).sum(axis=0)
            self.blocks.append(Block(base, idx, sizes, mask, times, upper, arm, count_ge))
        self._design = {}

    # -- layout conversions -------------------------------------------------

    def pad(self, vectors) -> list[np.ndarray]:
        """Per-patient vectors (dataset order) to zero-padded block arrays."""
        out = []
        for blk in self.blocks:
            arr = np.zeros((blk.idx.size, blk.K))
            for row, i in enumerate(blk.idx):
                v = np.asarray(vectors[i], float)
                arr[row, : v.size] = v
            out.append(arr)
        return out

    def unpad(self, arrays) -> list[np.ndarray]:
        vectors = [None] * self.n
        for blk, arr in zip(self.blocks, arrays):
            for row, i in enumerate(blk.idx):
                vectors[i] = arr[row, : blk.sizes[row]].copy()
        return vectors

    def to_dense(self, arrays, fill=np.nan) -> np.ndarray:
        """Stack block arrays into ``(n_patients, K_max)`` in dataset order."""
        kmax = max(blk.K for blk in self.blocks)
        out = np.full((self.n, kmax), fill)
        for blk, arr in zip(self.blocks, arrays):
            out[blk.idx, : blk.K] = np.where(blk.mask, arr, fill)
        return out

    def design(self, b: int, degree: int) -> np.ndarray:
        """Masked design tensor ``(n, K, degree+1)`` for block ``b``."""
        key = (b, degree)
        if key not in self._design:
            blk = self.blocks[b]
            X = blk.times[:, :, None] ** np.arange(degree + 1)[None, None, :]
            self._design[key] = X * blk.mask[:, :, None]
        return self._design[key]

    # -- means and residuals ------------------------------------------------

    def mean_arrays(self, means: dict) -> list[np.ndarray]:
        out = []
        for blk in self.blocks:
            mu = np.zeros((blk.idx.size, blk.K))
            for arm, model in means.items():
                rows = blk.arm == arm
                if not rows.any():
                    continue
                mu[rows] = np.asarray(model(blk.times[rows]), float)
            out.append(mu * blk.mask)
        return out

    def residuals(self, state: LatentState) -> list[np.ndarray]:
        a = self.pad(state.a)
        mu = self.mean_arrays(state.means)
        return [x - m for x, m in zip(a, mu)]

    def factors(self, kernel: str, params: KernelParams) -> list[BlockFactor]:
        return [factor_block(blk, kernel, params) for blk in self.blocks]

    # -- densities ----------------------------------------------------------

    def whiten(self, factors, arrays) -> list[np.ndarray]:
        """Rows ``L_j^{-1} x_j`` (zero beyond each patient's size)."""
        return [(x @ f.linv.T) * blk.mask for blk, f, x in zip(self.blocks, factors, arrays)]

    def solve(self, factors, arrays) -> list[np.ndarray]:
        """Rows ``C_j^{-1} x_j``."""
        out = []
        for blk, f, x in zip(self.blocks, factors, arrays):
            z = (x @ f.linv.T) * blk.mask
            out.append((z @ f.linv) * blk.mask)
        return out

    def log_gauss(self, factors, resid) -> float:
        """Sum over patients of ``-1/2 (r' C^-1 r + log|C|)`` (no 2 pi term)."""
        total = 0.0
        for blk, f, r in zip(self.blocks, factors, resid):
            z = (r @ f.linv.T) * blk.mask
            total += -0.5 * (np.sum(z * z) + 2.0 * f.logdiag @ blk.count_ge)
        return total

    def theta_energy(self, theta_vec, resid, prior: PriorConfig, kernel: str,
                     jitter: float, grad: bool = False):
        """Energy and (optionally) gradient for kernel parameters.

        Returns ``(E, dE/dtheta or None)``.  Raises NumericalError when the
        covariance of any block fails to factorise.
        """
        theta_vec = np.asarray(theta_vec, float)
        params = KernelParams(jitter=jitter).with_vector(theta_vec, kernel)
        E = -log_theta_prior(theta_vec, prior, kernel)
        g = -grad_log_theta_prior(theta_vec, prior, kernel) if grad else None
        for blk, r in zip(self.blocks, resid):
            C, dC = _kernel_terms(blk.diff, kernel, params, grad)
            f = _factor(C)
            z = (r @ f.linv.T) * blk.mask
            E += 0.5 * (np.sum(z * z) + 2.0 * f.logdiag @ blk.count_ge)
            if grad:
                alpha = (z @ f.linv) * blk.mask
                S = alpha.T @ alpha
                quad = (dC * S).sum(axis=(1, 2))
                # diag(L^-1 dC L^-T) summed over each patient's leading block
                diag = ((f.linv @ dC) * f.linv).sum(axis=2)
                g += -0.5 * quad + 0.5 * diag @ blk.count_ge
        return float(E), g

    def log_marginal_terms(self, factors, a_pad, arm: int, M: int):
        """Sufficient statistics ``(Q, b)`` for one arm at maximum degree ``M``.

        ``Q = sum_j X_j' C_j^-1 X_j`` and ``b = sum_j X_j' C_j^-1 a_j``; lower
        degrees use the leading blocks.
        """
        Q = np.zeros((M + 1, M + 1))
        b = np.zeros(M + 1)
        for bi, (blk, f, a) in enumerate(zip(self.blocks, factors, a_pad)):
            rows = blk.arm == arm
            if not rows.any():
                continue
            X = self.design(bi, M)[rows]
            ZX = (f.linv @ X) * blk.mask[rows][:, :, None]
            za = (a[rows] @ f.linv.T) * blk.mask[rows]
            flat = ZX.reshape(-1, M + 1)
            Q += flat.T @ flat
            b += za.reshape(-1) @ flat
        return Q, b

