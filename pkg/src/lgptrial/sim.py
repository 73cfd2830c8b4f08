"""Scenario truths, outcome generation and sequential trial replication."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .data import DEFAULT_HORIZON, DEFAULT_TIME_SCALE, PatientSeries, TrialDataset
from .errors import NumericalError, ValidationError
from .gp import KERNELS, KernelParams, build_cov
from .inference import MonitorConfig, Verdict, estimate_eta, monitor_decision
from .model import ArmMeanModel, MeanModel, PriorConfig, TrigMean, ddr, mean_values
from .samplers import McmcConfig, run_chain

DESK_ITERS = 2500
DESK_REPLICATES = 20
PAPER_REPLICATES = 100


@dataclass(frozen=True)
class ScenarioTruth:
    """Data-generating truth: one mean per arm, a kernel and its parameters."""

    means: dict
    kernel: str = "periodic"
    params: KernelParams = field(default_factory=lambda: KernelParams(1.0, 3.5, 2.0))
    a_h: float = 0.0
    horizon_weeks: int = DEFAULT_HORIZON
    time_scale: float = DEFAULT_TIME_SCALE

    def __post_init__(self):
        if not self.means:
            raise ValidationError("truth needs at least one arm")
        for arm, mean in self.means.items():
            if arm not in (1, 2):
                raise ValidationError(f"arm must be 1 or 2, got {arm}")
            if not isinstance(mean, (ArmMeanModel, TrigMean)):
                raise ValidationError(f"arm {arm}: unsupported mean {mean!r}")
        if self.kernel not in KERNELS:
            raise ValidationError(f"unknown kernel {self.kernel!r}")
        if self.horizon_weeks < 1:
            raise ValidationError("horizon_weeks must be >= 1")

    @property
    def arms(self) -> tuple:
        return tuple(sorted(self.means))

    @property
    def mean_form(self) -> str:
        forms = {"trig" if isinstance(m, TrigMean) else "poly" for m in self.means.values()}
        if len(forms) != 1:
            raise ValidationError("arms mix polynomial and trigonometric means")
        return forms.pop()

    def ddr(self, arm: int) -> float:
        return ddr(self.means[arm], self.a_h, self.horizon_weeks / self.time_scale, self.time_scale)

    def response_rate(self, arm: int, week) -> np.ndarray:
        """Analytic marginal ``Pr{mu(t) + tau(t) > a_h}`` at calendar ``week``."""
        t = np.asarray(week, float) / self.time_scale
        sd = math.sqrt(self.params.theta1**2 + self.params.jitter**2)
        return ndtr((mean_values(self.means[arm], t) - self.a_h) / sd)


def _poly(*beta) -> ArmMeanModel:
    return ArmMeanModel(len(beta) - 1, np.array(beta, float))


_SQEXP = KernelParams(1.0, 3.5, 3.0)

# Single-arm truths for the forecasting study.
SENSITIVITY = {
    1: ScenarioTruth({1: _poly(-0.8)}),
    2: ScenarioTruth({1: _poly(-0.8, 0.4)}),
    3: ScenarioTruth({1: _poly(-1.0, 3.5, -1.0)}),
    4: ScenarioTruth({1: TrigMean(-0.8, 1.5)}, kernel="sqexp", params=_SQEXP),
    5: ScenarioTruth({1: TrigMean(0.0, 1.0)}, kernel="sqexp", params=_SQEXP),
}

# Two-arm truths for the trial simulation (arm 1 standard, arm 2 experimental).
TRIAL = {
    1: ScenarioTruth({1: _poly(-2, 3.5, -1), 2: _poly(-1.4, 7.5, -5.3, 1)}),
    2: ScenarioTruth({1: _poly(-1.5, 7.5, -5.3, 1), 2: _poly(-1, 3.5, -1)}),
    3: ScenarioTruth({1: _poly(-2.4, 7.5, -5.3, 1), 2: _poly(-2.4, 3.5, -1)}),
    4: ScenarioTruth({1: _poly(-2, 7.5, -5.3, 1), 2: _poly(-1, 3.5, -1)}),
    5: ScenarioTruth({1: _poly(-1.28, 3.5, -1), 2: _poly(-1.2, 3.6, -1)}),
    6: ScenarioTruth({1: _poly(-0.39, 0.3), 2: _poly(-1.1, 1)}),
}


def generate_latent(truth: ScenarioTruth, arm: int, n_patients: int, weeks,
                    rng: np.random.Generator) -> np.ndarray:
    """Latent trajectories ``(n_patients, len(weeks))``: true mean plus GP draws."""
    t = np.asarray(weeks, float) / truth.time_scale
    cov = build_cov(t, truth.kernel, truth.params)
    z = rng.standard_normal((n_patients, t.size))
    return mean_values(truth.means[arm], t) + z @ cov.chol.T


def generate_outcomes(truth: ScenarioTruth, n_patients: int, weeks, rng: np.random.Generator,
                      return_latent: bool = False):
    """Simulate ``n_patients`` per arm observed at ``weeks``.

    Patient ids are ``"<arm>-<j>"``.  With ``return_latent`` the latent
    arrays are returned alongside, keyed by arm.
    """
    weeks = np.asarray(weeks, int)
    if n_patients < 1:
        raise ValidationError("n_patients must be >= 1")
    patients, latent = [], {}
    for arm in truth.arms:
        a = generate_latent(truth, arm, n_patients, weeks, rng)
        latent[arm] = a
        e = (a > truth.a_h).astype(int)
        patients.extend(PatientSeries(arm, f"{arm}-{j + 1}", weeks, e[j]) for j in range(n_patients))
    data = TrialDataset(tuple(patients), truth.horizon_weeks, truth.time_scale)
    return (data, latent) if return_latent else data


@dataclass(frozen=True)
class TrialDesign:
    max_per_arm: int = 100
    accrual: tuple = (2, 3, 4)
    first_look: int = 23
    horizon: int = DEFAULT_HORIZON
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    mcmc: McmcConfig = field(default_factory=lambda: McmcConfig().scaled(DESK_ITERS))
    prior: PriorConfig = field(default_factory=PriorConfig)
    replicates: int = DESK_REPLICATES
    workers: int = 1

    def __post_init__(self):
        if not 1 <= self.first_look <= self.horizon:
            raise ValidationError("need 1 <= first_look <= horizon")
        if self.replicates < 1 or self.max_per_arm < 1 or self.workers < 1:
            raise ValidationError("replicates, max_per_arm and workers must be >= 1")
        if not self.accrual or min(self.accrual) < 0:
            raise ValidationError("accrual must list non-negative weekly counts")


@dataclass(frozen=True)
class TrialRecord:
    index: int
    stop_week: int
    verdict: Verdict
    enrolled: tuple  # (arm 1, arm 2)
    eta_path: tuple  # eta_hat at each look


@dataclass(frozen=True)
class OperatingCharacteristics:
    n_trials: int
    ad: float
    md: int
    ap: float
    superiority_rate: float
    futility_rate: float
    no_stop_rate: float


def simulate_accrual(design: TrialDesign, rng: np.random.Generator) -> np.ndarray:
    """Entry week of every patient, shape ``(2, max_per_arm)``; 0 means never enrolled."""
    entry = np.zeros((2, design.max_per_arm), dtype=int)
    count = [0, 0]
    for week in range(1, design.horizon + 1):
        for k in range(2):
            n = min(int(rng.choice(design.accrual)), design.max_per_arm - count[k])
            entry[k, count[k]:count[k] + n] = week
            count[k] += n
    return entry


def trial_data_at(truth: ScenarioTruth, entry: np.ndarray, outcomes: dict, week: int) -> TrialDataset:
    """Data available at the end of calendar ``week``: each patient from entry to ``week``."""
    patients = []
    for k, arm in enumerate((1, 2)):
        for j in np.nonzero((entry[k] > 0) & (entry[k] <= week))[0]:
            weeks = np.arange(entry[k, j], week + 1)
            patients.append(PatientSeries(arm, f"{arm}-{j + 1}", weeks, outcomes[arm][j, weeks - 1]))
    return TrialDataset(tuple(patients), truth.horizon_weeks, truth.time_scale)


def run_trial(truth: ScenarioTruth, design: TrialDesign, seed, index: int = 0) -> TrialRecord:
    """Simulate one trial with weekly looks from ``first_look`` to the horizon.

    Full latent trajectories are drawn on the calendar grid up front, so a
    patient's outcomes do not depend on when the trial is looked at.
    """
    if truth.arms != (1, 2):
        raise ValidationError("trial simulation needs a two-arm truth")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    data_ss, fit_ss = ss.spawn(2)
    rng = np.random.default_rng(data_ss)
    entry = simulate_accrual(design, rng)
    grid = np.arange(1, design.horizon + 1)
    outcomes = {arm: (generate_latent(truth, arm, design.max_per_arm, grid, rng) > truth.a_h).astype(int)
                for arm in (1, 2)}
    prior = replace(design.prior, a_h=truth.a_h)
    etas = []
    look_seeds = fit_ss.generate_state(design.horizon + 1)
    verdict, week = Verdict.CONTINUE, design.horizon
    for week in range(design.first_look, design.horizon + 1):
        data = trial_data_at(truth, entry, outcomes, week)
        cfg = replace(design.mcmc, seed=int(look_seeds[week]))
        try:
            draws = run_chain(data, prior, cfg, kernel=truth.kernel, keep_latent=False)
        except NumericalError as exc:
            raise NumericalError(f"trial {index}, week {week}: {exc}", exc.minor, exc.iteration) from exc
        dec = monitor_decision(estimate_eta(draws, design.monitor), design.monitor)
        etas.append(dec.eta_hat)
        if dec.verdict is not Verdict.CONTINUE:
            verdict = dec.verdict
            break
    enrolled = tuple(int(np.count_nonzero((entry[k] > 0) & (entry[k] <= week))) for k in range(2))
    return TrialRecord(index, week, verdict, enrolled, tuple(etas))


def _run_one(args):
    truth, design, seed, index = args
    return run_trial(truth, design, seed, index)


def simulate_trials(truth: ScenarioTruth, design: TrialDesign, seed: int = 0,
                    progress=None) -> list[TrialRecord]:
    """Replicate trials with independent child seeds; results ordered by replicate."""
    seeds = np.random.SeedSequence(seed).spawn(design.replicates)
    jobs = [(truth, design, s, i) for i, s in enumerate(seeds)]
    records = []
    if design.workers > 1:
        with ProcessPoolExecutor(max_workers=design.workers) as pool:
            for rec in pool.map(_run_one, jobs):
                records.append(rec)
                if progress:
                    progress(rec)
    else:
        for job in jobs:
            rec = _run_one(job)
            records.append(rec)
            if progress:
                progress(rec)
    return records


def operating_characteristics(records) -> OperatingCharacteristics:
    if not records:
        raise ValidationError("no trial records")
    n = len(records)
    stops = np.array([r.stop_week for r in records])
    counts = {v: sum(r.verdict is v for r in records) for v in Verdict}
    sup, fut = counts[Verdict.STOP_SUPERIOR], counts[Verdict.STOP_FUTILE]
    return OperatingCharacteristics(
        n_trials=n,
        ad=float(stops.mean()),
        md=int(stops.max()),
        ap=float(np.mean([np.mean(r.enrolled) for r in records])),
        superiority_rate=sup / n,
        futility_rate=fut / n,
        no_stop_rate=(n - sup - fut) / n,
    )


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("trial", "stop_week", "verdict", "n_arm1", "n_arm2", "final_eta"))
        for r in records:
            eta = f"{r.eta_path[-1]:.4f}" if r.eta_path else ""
            w.writerow((r.index, r.stop_week, r.verdict.value, *r.enrolled, eta))


def write_oc_csv(oc: OperatingCharacteristics, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        row = asdict(oc)
        w.writerow(row.keys())
        w.writerow(f"{v:.6g}" if isinstance(v, float) else v for v in row.values())


# -- JSON scenario files ------------------------------------------------------

_TRUTH_KEYS = {"arms", "kernel", "theta1", "theta2", "r", "jitter", "a_h", "horizon_weeks", "time_scale"}
_DESIGN_KEYS = {"max_per_arm", "accrual", "first_look", "horizon", "replicates", "workers"}
_TOP_KEYS = {"scenario", "truth", "design", "monitor", "mcmc"}


def _reject_unknown(obj: dict, allowed: set, where: str) -> None:
    extra = set(obj) - allowed
    if extra:
        raise ValidationError(f"{where}: unknown keys {sorted(extra)}")


def _mean_from_json(spec, arm) -> MeanModel:
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ValidationError(f"arm {arm}: give exactly one of 'beta' or 'trig'")
    (form, values), = spec.items()
    if form == "beta":
        return _poly(*values)
    if form == "trig":
        alpha, freq = values
        return TrigMean(float(alpha), float(freq))
    raise ValidationError(f"arm {arm}: unknown mean form {form!r}")


def truth_from_json(obj: dict) -> ScenarioTruth:
    _reject_unknown(obj, _TRUTH_KEYS, "truth")
    if "arms" not in obj:
        raise ValidationError("truth: 'arms' is required")
    means = {int(a): _mean_from_json(s, a) for a, s in obj["arms"].items()}
    params = KernelParams(obj.get("theta1", 1.0), obj.get("theta2", 3.5), obj.get("r", 2.0),
                          obj.get("jitter", 0.1))
    return ScenarioTruth(means, obj.get("kernel", "periodic"), params, float(obj.get("a_h", 0.0)),
                         int(obj.get("horizon_weeks", DEFAULT_HORIZON)),
                         float(obj.get("time_scale", DEFAULT_TIME_SCALE)))


def load_scenario(path) -> tuple[ScenarioTruth, TrialDesign]:
    """Read a JSON scenario: ``scenario`` (built-in trial number) or ``truth``,
    plus optional ``design``, ``monitor`` and ``mcmc`` overrides."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    _reject_unknown(obj, _TOP_KEYS, "scenario file")
    if ("scenario" in obj) == ("truth" in obj):
        raise ValidationError("give exactly one of 'scenario' or 'truth'")
    if "scenario" in obj:
        if obj["scenario"] not in TRIAL:
            raise ValidationError(f"unknown scenario {obj['scenario']!r}; choose 1-6")
        truth = TRIAL[obj["scenario"]]
    else:
        truth = truth_from_json(obj["truth"])
    design_obj = obj.get("design", {})
    _reject_unknown(design_obj, _DESIGN_KEYS, "design")
    if "accrual" in design_obj:
        design_obj = {**design_obj, "accrual": tuple(design_obj["accrual"])}
    try:
        monitor = MonitorConfig(**obj.get("monitor", {}))
        mcmc = McmcConfig(**{**asdict(McmcConfig().scaled(DESK_ITERS)), **obj.get("mcmc", {})})
        design = TrialDesign(monitor=monitor, mcmc=mcmc, **design_obj)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return truth, design
