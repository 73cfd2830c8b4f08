"""Command-line entry point: ``lgptrial {fit,forecast,monitor,simulate,generate}``.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import DEFAULT_HORIZON, load_dataset, save_dataset
from .errors import NumericalError, ValidationError
from .inference import (
    MonitorConfig,
    estimate_eta,
    forecast_all,
    monitor_decision,
    posterior_summary,
    write_forecast_csv,
    write_summary_csv,
)
from .model import PriorConfig
from .samplers import McmcConfig, diagnostics, load_draws, run_chain, save_draws, write_trace_csv
from .sim import (
    PAPER_REPLICATES,
    SENSITIVITY,
    TRIAL,
    TrialDesign,
    generate_outcomes,
    load_scenario,
    operating_characteristics,
    simulate_trials,
    write_oc_csv,
    write_records_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# Hard defaults for options that can also come from --config.
DEFAULTS = {
    "seed": 0,
    "iters": 10000,
    "burnin": 2000,
    "thin": 10,
    "delta": 2.0,
    "xi_upper": 0.95,
    "xi_lower": 0.05,
    "ah": 0.0,
    "max_degree": 5,
    "kernel": "periodic",
    "mean": "poly",
    "weeks": None,
    "replicates": None,
    "workers": 1,
    "patients": 100,
    "last_week": DEFAULT_HORIZON,
}

log = logging.getLogger("lgptrial")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of option values (flags win)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--paper-scale", action="store_true",
                   help="10,000 iterations per fit (and 100 replicates for simulate)")
    p.add_argument("-v", "--verbose", action="store_true")


def _mcmc_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iters", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--ah", type=float, help="response threshold a_h")
    p.add_argument("--max-degree", type=int, help="largest polynomial degree M")
    p.add_argument("--kernel", choices=("periodic", "sqexp"))
    p.add_argument("--mean", choices=("poly", "trig"), help="mean function family")


def _monitor_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--delta", type=float, help="superiority margin in weeks")
    p.add_argument("--xi-upper", type=float)
    p.add_argument("--xi-lower", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lgptrial", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="run the sampler and write posterior summaries")
    p.add_argument("data", type=Path, help="outcome CSV (arm,patient_id,week,outcome)")
    _common(p)
    _mcmc_flags(p)

    p = sub.add_parser("forecast", help="posterior predictive response probabilities")
    p.add_argument("data", type=Path)
    p.add_argument("--weeks", type=int, nargs="+", help="future weeks to forecast")
    p.add_argument("--draws", type=Path, help="reuse draws.npz written by 'fit'")
    _common(p)
    _mcmc_flags(p)

    p = sub.add_parser("monitor", help="interim decision for a two-arm dataset")
    p.add_argument("data", type=Path)
    _common(p)
    _mcmc_flags(p)
    _monitor_flags(p)

    p = sub.add_parser("simulate", help="replicate trials and report operating characteristics")
    p.add_argument("--scenario", required=True,
                   help="JSON scenario file, or a built-in trial scenario number 1-6")
    p.add_argument("--replicates", type=int)
    p.add_argument("--workers", type=int)
    _common(p)
    _mcmc_flags(p)
    _monitor_flags(p)

    p = sub.add_parser("generate", help="export simulated outcome data")
    p.add_argument("--scenario", required=True,
                   help="'s1'..'s5' (single-arm forecasting truths), 1-6 (trial truths) or a JSON file")
    p.add_argument("--patients", type=int, help="patients per arm")
    p.add_argument("--last-week", type=int, help="observe weeks 1..last-week")
    _common(p)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge hard defaults, --config values and explicit flags (in that order)."""
    opts = dict(DEFAULTS)
    given = set()
    if args.config is not None:
        try:
            cfg = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        opts.update(cfg)
        given.update(cfg)
    if args.paper_scale:
        opts["iters"], opts["burnin"] = 10000, 2000
        opts["replicates"] = PAPER_REPLICATES
    explicit = {k for k in DEFAULTS if getattr(args, k, None) is not None}
    for key in explicit:
        opts[key] = getattr(args, key)
    given |= explicit
    if "iters" in given and "burnin" not in given:
        # keep the default burn-in fraction
        opts["burnin"] = int(round(opts["iters"] * DEFAULTS["burnin"] / DEFAULTS["iters"]))
    if args.paper_scale:
        given |= {"iters", "burnin"}
    opts["given"] = frozenset(given)
    return opts


def _mcmc(opts: dict) -> McmcConfig:
    return McmcConfig(n_iters=opts["iters"], burn_in=opts["burnin"], thin=opts["thin"], seed=opts["seed"])


def _prior(opts: dict) -> PriorConfig:
    return PriorConfig(M=opts["max_degree"], a_h=opts["ah"])


def _monitor(opts: dict) -> MonitorConfig:
    return MonitorConfig(opts["delta"], opts["xi_upper"], opts["xi_lower"])


def _fit(opts, data):
    draws = run_chain(data, _prior(opts), _mcmc(opts), kernel=opts["kernel"], mean_form=opts["mean"])
    log.info("retained %d draws, HMC acceptance %.3f", len(draws), draws.accept_rate)
    return draws


def cmd_fit(args, opts) -> int:
    data = load_dataset(args.data)
    draws = _fit(opts, data)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(posterior_summary(draws), out / "summary.csv")
    write_trace_csv(draws, out / "trace.csv")
    save_draws(draws, out / "draws.npz")
    if len(draws) >= 10:
        with open(out / "diagnostics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("param", "ess", "acf1", "constant"))
            for name, d in diagnostics(draws).items():
                acf1 = d.acf[1] if d.acf.size > 1 else float("nan")
                w.writerow((name, f"{d.ess:.1f}", f"{acf1:.4f}", int(d.constant)))
    print(f"wrote {out / 'summary.csv'} ({len(draws)} draws, HMC acceptance {draws.accept_rate:.3f})")
    return EXIT_OK


def cmd_forecast(args, opts) -> int:
    data = load_dataset(args.data)
    weeks = opts["weeks"]
    if not weeks:
        raise UsageError("forecast needs --weeks")
    last = max(p.last_week for p in data.patients)
    if min(weeks) <= last:
        raise ValidationError(f"forecast weeks must be after the last observed week {last}")
    draws = load_draws(args.draws) if args.draws else _fit(opts, data)
    rows = forecast_all(draws, data, sorted(weeks), PriorConfig(M=draws.M, a_h=draws.a_h))
    args.out.mkdir(parents=True, exist_ok=True)
    write_forecast_csv(rows, args.out / "forecast.csv")
    for w in sorted(weeks):
        q = np.mean([r[3] for r in rows if r[2] == w])
        print(f"week {w}: mean q_hat {q:.4f}")
    return EXIT_OK


def cmd_monitor(args, opts) -> int:
    data = load_dataset(args.data)
    if data.arms != (1, 2):
        raise ValidationError("monitoring needs a two-arm dataset (arms 1 and 2)")
    cfg = _monitor(opts)
    draws = _fit(opts, data)
    dec = monitor_decision(estimate_eta(draws, cfg), cfg)
    t1, t2 = draws.ddr(1).mean(), draws.ddr(2).mean()
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "monitor.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("eta_hat", "verdict", "delta", "xi_upper", "xi_lower", "ddr_arm1", "ddr_arm2"))
        w.writerow((f"{dec.eta_hat:.4f}", dec.verdict.value, cfg.delta, cfg.xi_upper, cfg.xi_lower,
                    f"{t1:.3f}", f"{t2:.3f}"))
    print(f"eta_hat = {dec.eta_hat:.4f}  verdict = {dec.verdict.value}")
    return EXIT_OK


def _scenario(value: str):
    path = Path(value)
    if path.is_file():
        return load_scenario(path)
    try:
        num = int(value)
    except ValueError:
        raise ValidationError(f"scenario {value!r} is neither a file nor a number 1-6") from None
    if num not in TRIAL:
        raise ValidationError(f"unknown scenario {num}; choose 1-6")
    return TRIAL[num], TrialDesign()


def cmd_simulate(args, opts) -> int:
    truth, design = _scenario(args.scenario)
    given = opts["given"]
    # the scenario's own settings stand unless an option was set explicitly
    overrides = {}
    mcmc = design.mcmc
    if "iters" in given:
        mcmc = replace(mcmc, n_iters=opts["iters"], burn_in=opts["burnin"])
    elif "burnin" in given:
        mcmc = replace(mcmc, burn_in=opts["burnin"])
    if "thin" in given:
        mcmc = replace(mcmc, thin=opts["thin"])
    overrides["mcmc"] = mcmc
    mon = design.monitor
    if given & {"delta", "xi_upper", "xi_lower"}:
        mon = MonitorConfig(opts["delta"] if "delta" in given else mon.delta,
                            opts["xi_upper"] if "xi_upper" in given else mon.xi_upper,
                            opts["xi_lower"] if "xi_lower" in given else mon.xi_lower)
    overrides["monitor"] = mon
    if opts["replicates"] is not None:
        overrides["replicates"] = opts["replicates"]
    if "workers" in given:
        overrides["workers"] = opts["workers"]
    if "max_degree" in given:
        overrides["prior"] = replace(design.prior, M=opts["max_degree"])
    if "ah" in given:
        truth = replace(truth, a_h=opts["ah"])
    design = replace(design, **overrides)

    def progress(rec):
        log.info("trial %d: %s at week %d", rec.index, rec.verdict.value, rec.stop_week)

    records = simulate_trials(truth, design, seed=opts["seed"], progress=progress)
    oc = operating_characteristics(records)
    args.out.mkdir(parents=True, exist_ok=True)
    write_records_csv(records, args.out / "trials.csv")
    write_oc_csv(oc, args.out / "operating_characteristics.csv")
    print(f"AD {oc.ad:.2f}  MD {oc.md}  AP {oc.ap:.2f}  superiority {oc.superiority_rate:.2f}  "
          f"futility {oc.futility_rate:.2f}  no stop {oc.no_stop_rate:.2f}")
    return EXIT_OK


def cmd_generate(args, opts) -> int:
    value = args.scenario
    if value.lower().startswith("s") and value[1:].isdigit():
        num = int(value[1:])
        if num not in SENSITIVITY:
            raise ValidationError(f"unknown forecasting scenario {value}; choose s1-s5")
        truth = SENSITIVITY[num]
    else:
        truth, _ = _scenario(value)
    if not 1 <= opts["last_week"] <= truth.horizon_weeks:
        raise ValidationError(f"--last-week must lie in 1..{truth.horizon_weeks}")
    rng = np.random.default_rng(opts["seed"])
    data = generate_outcomes(truth, opts["patients"], np.arange(1, opts["last_week"] + 1), rng)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "outcomes.csv"
    save_dataset(data, path)
    print(f"wrote {path} ({len(data)} patients)")
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "monitor": cmd_monitor,
    "simulate": cmd_simulate,
    "generate": cmd_generate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        return COMMANDS[args.command](args, opts)
    except NumericalError as exc:
        print(f"lgptrial: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValidationError, ValueError, KeyError, OSError) as exc:
        print(f"lgptrial: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
