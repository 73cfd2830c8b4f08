"""Latent Gaussian process models for longitudinal binary trial outcomes."""

from .data import PatientSeries, TrialDataset, load_dataset, save_dataset
from .errors import NumericalError, ParseError, ValidationError
from .gp import KernelParams, build_cov, gp_conditional, mvn_sample
from .inference import (
    ForecastRequest,
    MonitorConfig,
    MonitorDecision,
    Verdict,
    estimate_eta,
    forecast_q,
    monitor_decision,
    posterior_summary,
)
from .model import ArmMeanModel, PriorConfig, TrigMean, ddr
from .samplers import McmcConfig, PosteriorDraws, run_chain
from .sim import (
    SENSITIVITY,
    TRIAL,
    ScenarioTruth,
    TrialDesign,
    generate_outcomes,
    operating_characteristics,
    run_trial,
)

__version__ = "0.1.0"

__all__ = [
    "ArmMeanModel", "ForecastRequest", "KernelParams", "McmcConfig", "MonitorConfig",
    "MonitorDecision", "NumericalError", "ParseError", "PatientSeries", "PosteriorDraws",
    "PriorConfig", "SENSITIVITY", "ScenarioTruth", "TRIAL", "TrialDataset", "TrialDesign",
    "TrigMean", "ValidationError", "Verdict", "build_cov", "ddr", "estimate_eta", "forecast_q",
    "generate_outcomes", "gp_conditional", "load_dataset", "monitor_decision", "mvn_sample",
    "operating_characteristics", "posterior_summary", "run_chain", "run_trial", "save_dataset",
]
