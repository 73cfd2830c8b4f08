"""Posterior-predictive forecasts, the monitoring probability and stopping rules."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .data import TrialDataset
from .errors import ValidationError
from .gp import build_cov, cov_values, cross_cov
from .model import PriorConfig, mean_values
from .samplers import PosteriorDraws


@dataclass(frozen=True)
class ForecastRequest:
    arm: int
    patient_id: str
    future_weeks: tuple

    def __post_init__(self):
        weeks = tuple(int(w) for w in self.future_weeks)
        if not weeks:
            raise ValidationError("future_weeks is empty")
        object.__setattr__(self, "future_weeks", weeks)
        object.__setattr__(self, "patient_id", str(self.patient_id))


@dataclass(frozen=True)
class MonitorConfig:
    delta: float = 2.0
    xi_upper: float = 0.95
    xi_lower: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.xi_lower < self.xi_upper <= 1.0:
            raise ValidationError("need 0 <= xi_lower < xi_upper <= 1")
        if self.delta < 0:
            raise ValidationError("delta must be non-negative")


class Verdict(enum.Enum):
    STOP_SUPERIOR = "StopSuperior"
    CONTINUE = "Continue"
    STOP_FUTILE = "StopFutile"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class MonitorDecision:
    eta_hat: float
    verdict: Verdict


def _check_request(req: ForecastRequest, data: TrialDataset) -> int:
    i = data.find(req.arm, req.patient_id)
    last = data.patients[i].last_week
    if min(req.future_weeks) <= last:
        raise ValidationError(
            f"patient {req.patient_id}: future weeks must be after last observed week {last}"
        )
    return i


def forecast_q(draws: PosteriorDraws, req: ForecastRequest, data: TrialDataset,
               prior: PriorConfig | None = None) -> np.ndarray:
    """Posterior predictive response probability at each requested week.

    For every retained draw the future latent values are conditioned on that
    draw's latent vector, mean and kernel parameters; each future point's
    marginal is thresholded at ``a_h`` and the results are averaged over draws.
    """
    return forecast_many(draws, [req], data, prior)[0]


def forecast_many(draws: PosteriorDraws, requests: Sequence[ForecastRequest],
                  data: TrialDataset, prior: PriorConfig | None = None) -> list[np.ndarray]:
    """:func:`forecast_q` for many requests, sharing work across patients.

    Requests with the same observed and future time grids share one
    conditional covariance per draw, so only the conditional means differ.
    """
    if len(draws) == 0:
        raise ValidationError("no posterior draws")
    if draws.latent is None:
        raise ValidationError("forecasting needs retained latent draws")
    a_h = draws.a_h if prior is None else prior.a_h
    scale = data.time_scale
    groups: dict = {}
    for r, req in enumerate(requests):
        i = _check_request(req, data)
        key = (req.arm, tuple(data.patients[i].weeks), req.future_weeks)
        groups.setdefault(key, []).append((r, i))

    out = [None] * len(requests)
    for (arm, obs_weeks, fut_weeks), members in groups.items():
        t_obs = np.asarray(obs_weeks, float) / scale
        t_new = np.asarray(fut_weeks, float) / scale
        rows = np.array([i for _, i in members])
        k = t_obs.size
        acc = np.zeros((rows.size, t_new.size))
        for b in range(len(draws)):
            p = draws.kernel_params(b)
            mean = draws.mean_model(b, arm)
            c_oo = build_cov(t_obs, draws.kernel, p)
            w = c_oo.whiten(cross_cov(t_obs, t_new, draws.kernel, p))
            resid = draws.latent[b, rows, :k] - mean_values(mean, t_obs)
            z = c_oo.whiten(resid.T)
            cond_mean = mean_values(mean, t_new) + (w.T @ z).T
            var = np.diag(cov_values(t_new, draws.kernel, p)) - np.sum(w * w, axis=0)
            sd = np.sqrt(np.maximum(var, 0.0))
            acc += ndtr((cond_mean - a_h) / sd)
        acc /= len(draws)
        for row, (r, _) in enumerate(members):
            out[r] = acc[row]
    return out


def forecast_all(draws: PosteriorDraws, data: TrialDataset, future_weeks,
                 prior: PriorConfig | None = None) -> list[tuple[int, str, int, float]]:
    """Rows ``(arm, patient_id, week, q_hat)`` for every patient in ``data``."""
    reqs = [ForecastRequest(p.arm, p.patient_id, tuple(future_weeks)) for p in data.patients]
    qs = forecast_many(draws, reqs, data, prior)
    return [(r.arm, r.patient_id, w, float(q))
            for r, qrow in zip(reqs, qs) for w, q in zip(r.future_weeks, qrow)]


def eta_from_ddr(t1: np.ndarray, t2: np.ndarray, delta: float) -> float:
    t1, t2 = np.asarray(t1, float), np.asarray(t2, float)
    if t1.size == 0 or t1.shape != t2.shape:
        raise ValidationError("need matching, nonempty DDR draws")
    return float(np.mean(t2 > t1 + delta))


def estimate_eta(draws: PosteriorDraws, cfg: MonitorConfig | None = None) -> float:
    """Share of draws in which arm 2's DDR beats arm 1's by more than ``delta``."""
    cfg = cfg or MonitorConfig()
    if len(draws) == 0:
        raise ValidationError("no posterior draws")
    if tuple(draws.arms) != (1, 2):
        raise ValidationError("monitoring needs both arms")
    return eta_from_ddr(draws.ddr(1), draws.ddr(2), cfg.delta)


def monitor_decision(eta_hat: float, cfg: MonitorConfig | None = None) -> MonitorDecision:
    cfg = cfg or MonitorConfig()
    if not 0.0 <= eta_hat <= 1.0:
        raise ValidationError(f"eta_hat must lie in [0, 1], got {eta_hat}")
    if eta_hat >= cfg.xi_upper:
        verdict = Verdict.STOP_SUPERIOR
    elif eta_hat <= cfg.xi_lower:
        verdict = Verdict.STOP_FUTILE
    else:
        verdict = Verdict.CONTINUE
    return MonitorDecision(float(eta_hat), verdict)


@dataclass(frozen=True)
class ParamSummary:
    arm: int | None
    param: str
    mean: float
    sd: float
    lo95: float
    hi95: float


def _summ(arm, name, x) -> ParamSummary:
    x = np.asarray(x, float)
    lo, hi = np.quantile(x, [0.025, 0.975])
    return ParamSummary(arm, name, float(x.mean()), float(x.std(ddof=1)) if x.size > 1 else 0.0,
                        float(lo), float(hi))


@dataclass(frozen=True)
class PosteriorSummary:
    params: tuple
    degree_props: dict  # arm -> array over 0..M
    ddr_mean: dict  # arm -> posterior mean DDR (weeks)

    def row(self, arm, param) -> ParamSummary:
        for s in self.params:
            if s.arm == arm and s.param == param:
                return s
        raise KeyError((arm, param))


def posterior_summary(draws: PosteriorDraws) -> PosteriorSummary:
    if len(draws) == 0:
        raise ValidationError("no posterior draws")
    rows = [_summ(None, name, draws.theta[:, k]) for k, name in enumerate(draws.param_names)]
    props, ddr_mean = {}, {}
    for k, arm in enumerate(draws.arms):
        if draws.mean_form == "trig":
            rows.append(_summ(arm, "alpha", draws.beta[:, k, 0]))
            rows.append(_summ(arm, "freq", draws.beta[:, k, 1]))
        else:
            m = draws.m[:, k]
            props[arm] = np.bincount(m, minlength=draws.M + 1) / m.size
            for d in range(draws.M + 1):
                # coefficient summaries over the draws where it is part of the model
                used = m >= d
                if used.any():
                    rows.append(_summ(arm, f"beta{d}", draws.beta[used, k, d]))
        t = draws.ddr(arm)
        ddr_mean[arm] = float(t.mean())
        rows.append(_summ(arm, "ddr", t))
    return PosteriorSummary(tuple(rows), props, ddr_mean)


def write_summary_csv(summary: PosteriorSummary, path: str | Path) -> None:
    """``arm,param,mean,sd,lo95,hi95``; degree proportions appear as ``m=d`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("arm", "param", "mean", "sd", "lo95", "hi95"))
        for s in summary.params:
            w.writerow(("" if s.arm is None else s.arm, s.param,
                        *(f"{v:.6g}" for v in (s.mean, s.sd, s.lo95, s.hi95))))
        for arm, props in summary.degree_props.items():
            for d, pr in enumerate(props):
                w.writerow((arm, f"m={d}", f"{pr:.6g}", "", "", ""))


def write_forecast_csv(rows, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("patient_id", "week", "q_hat"))
        for _, pid, week, q in rows:
            w.writerow((pid, week, f"{q:.6f}"))
