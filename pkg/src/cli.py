"""
Command line for scenario simulation, gold standards and estimator benchmarks.

Subcommands:
- simulate: one observed (or counterfactual) dataset plus its network
- truth: Monte-Carlo psi0 for an action, or the coupled ATE of two actions
- estimate: GCOMP/IPW estimates on a data file or a freshly simulated dataset
- experiment: replicated benchmark of the estimators against psi0
- sweep: the benchmark over equally spaced constant settings

Every output CSV starts with "# " lines echoing the command and its resolved
flags (thread count and output paths excluded), so reruns with the same
scenario, flags and seed produce byte-identical files.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import pathlib
import sys
from typing import Dict, List, Sequence

import config
from src import experiment as exp
from src.causaltarget import ate, mc_target_mean
from src.csvio import write_rows_atomic
from src.errors import (
    ExprSyntaxError,
    ModelError,
    NetsemError,
    ParameterError,
    ScenarioError,
    ValidationError,
)
from src.estimators import EstimateReport, estimate_all
from src.scenario import Scenario, load_scenario
from src.simengine import export, network_path_for, read_dataset, simulate_action, simulate_observed

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

USER_ERRORS = (ScenarioError, ValidationError, ModelError, ExprSyntaxError, ParameterError)
UNECHOED = {"command", "threads", "out", "metrics", "verbose", "func"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _param(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    if not sep or not name.strip():
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    try:
        return name.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{name.strip()}: {value!r} is not a number") from None


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        threads = flag
    else:
        raw = os.environ.get(config.THREADS_ENV, "").strip()
        try:
            threads = int(raw) if raw else 1
        except ValueError:
            raise ParameterError(f"{config.THREADS_ENV}={raw!r} is not an integer") from None
    if threads < 1:
        raise ParameterError(f"thread count must be at least 1, got {threads}")
    return threads


def _header(args: argparse.Namespace) -> List[str]:
    lines = [f"netsem {args.command}"]
    for key, value in sorted(vars(args).items()):
        if key in UNECHOED or value is None or value is False or value == []:
            continue
        if key == "param":
            value = ",".join(f"{k}={v:g}" for k, v in value)
        lines.append(f"{key}: {value}")
    return lines


def _settings(args: argparse.Namespace, scenario: Scenario) -> Dict[str, object]:
    s = scenario.experiment
    params = dict(s.params)
    params.update(dict(args.param or []))
    return {
        "n": args.n or s.n or config.N_UNITS,
        "seed": args.seed if args.seed is not None else (s.seed if s.seed is not None else config.SEED),
        "action": getattr(args, "action", None) or s.action,
        "params": params,
    }


def _known(scenario: Scenario, action: str | None, params: Dict[str, float]) -> Dict[str, float]:
    if not action:
        return {}
    declared = scenario.model.action(action).params
    return {k: v for k, v in params.items() if k in declared}


# --- commands --------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    opts = _settings(args, scenario)
    model = scenario.model
    if args.action:
        data = simulate_action(model, args.action, opts["n"], opts["seed"], args.replicate, _known(scenario, args.action, opts["params"]))
    else:
        data = simulate_observed(model, opts["n"], opts["seed"], args.replicate)
    for path in export(data, args.out, comments=_header(args)):
        print(f"Wrote {path}")
    return EXIT_OK


def cmd_truth(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    opts = _settings(args, scenario)
    action = opts["action"]
    if not action:
        raise ParameterError("truth needs --action (or experiment.action in the scenario)")
    reps = args.reps or scenario.experiment.truth_reps or config.TRUTH_REPS
    threads = resolve_threads(args.threads)
    keep = args.out is not None
    if args.action0:
        result = ate(
            scenario.model, action, args.action0, opts["n"], reps, opts["seed"],
            params=opts["params"], threads=threads, keep_replicates=keep,
        )
    else:
        result = mc_target_mean(
            scenario.model, action, opts["n"], reps, opts["seed"],
            params=_known(scenario, action, opts["params"]), threads=threads, keep_replicates=keep,
        )
    print(result.summary())
    print(f"psi0 = {result.value:.6f}")
    if keep:
        rows = ([r + 1, v] for r, v in enumerate(result.replicates))
        path = write_rows_atomic(args.out, ["replicate", "value"], rows, comments=_header(args))
        print(f"Wrote {path}")
    return EXIT_OK


def _estimation(scenario: Scenario, args: argparse.Namespace, params: Dict[str, float]):
    if scenario.estimation is None:
        raise ScenarioError("scenario has no estimation block", str(scenario.path))
    est = scenario.estimation.with_params(**params)
    if args.n_boot is not None:
        if args.n_boot == 1 or args.n_boot < 0:
            raise ParameterError(f"--n-boot must be 0 or at least 2, got {args.n_boot}")
        est = dataclasses.replace(est, n_boot=args.n_boot)
    return est


def cmd_estimate(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    opts = _settings(args, scenario)
    est = _estimation(scenario, args, opts["params"])
    if args.data:
        net = args.net or network_path_for(args.data)
        data = read_dataset(args.data, net if pathlib.Path(net).exists() else None)
    else:
        data = simulate_observed(scenario.model, opts["n"], opts["seed"], args.replicate)
    reports = estimate_all(data, est, opts["seed"], args.replicate, resolve_threads(args.threads))
    for rep in reports:
        lo, hi = rep.ci_iid
        print(f"{rep.estimator}: {rep.estimate:.6f}  IID 95% CI [{lo:.6f}, {hi:.6f}]")
    path = write_rows_atomic(args.out, EstimateReport.HEADER, [r.row() for r in reports], comments=_header(args))
    print(f"Wrote {path}")
    return EXIT_OK


def _experiment_inputs(scenario: Scenario, args: argparse.Namespace):
    opts = _settings(args, scenario)
    if not opts["action"]:
        raise ParameterError("needs --action (or experiment.action in the scenario)")
    est = _estimation(scenario, args, opts["params"])
    s = scenario.experiment
    reps = args.reps or s.reps or config.EXPERIMENT_REPS
    truth_reps = args.truth_reps or s.truth_reps or config.TRUTH_REPS
    return opts, est, reps, truth_reps


def cmd_experiment(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    opts, est, reps, truth_reps = _experiment_inputs(scenario, args)
    result = exp.run_experiment(
        scenario.model, opts["action"], est, opts["n"], reps, opts["seed"], truth_reps,
        params=opts["params"], threads=resolve_threads(args.threads),
        oracle=scenario.experiment.oracle, scenario=scenario.model.name,
    )
    for m in result.metrics:
        print(f"{m.estimator}: bias {m.bias:+.5f}  variance {m.variance:.6f}  IID coverage {m.cover_iid:.3f}")
    header = _header(args)
    print(f"Wrote {exp.write_metrics(args.out, [result], header)}")
    if result.failures:
        print(f"Wrote {exp.write_failures(pathlib.Path(args.out).with_suffix('.failures.csv'), [result], header)}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    if scenario.sweep is None:
        raise ScenarioError("scenario has no sweep block", str(scenario.path))
    opts, est, reps, truth_reps = _experiment_inputs(scenario, args)
    k = args.k or scenario.sweep.k or config.SWEEP_K
    sweep = exp.scenario_sweep(
        scenario.model, scenario.sweep.start, scenario.sweep.end, k, opts["action"], est,
        opts["n"], reps, opts["seed"], truth_reps,
        params=opts["params"], threads=resolve_threads(args.threads), oracle=scenario.experiment.oracle,
    )
    header = _header(args)
    print(f"Wrote {exp.write_sweep(args.out, sweep, header)}")
    if args.metrics:
        print(f"Wrote {exp.write_metrics(args.metrics, sweep.experiments, header)}")
    failures = [r for res in sweep.experiments for r in res.failures]
    if failures:
        print(f"Wrote {exp.write_failures(pathlib.Path(args.out).with_suffix('.failures.csv'), sweep.experiments, header)}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="netsem", description="Simulate network-dependent data and benchmark causal estimators.")
    parser.add_argument("--verbose", action="store_true", help="Log debug messages.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser, out_help: str) -> None:
        p.add_argument("--scenario", required=True, type=pathlib.Path, help="Scenario YAML file.")
        p.add_argument("--n", type=int, help=f"Units per dataset. Default: scenario, then {config.N_UNITS}.")
        p.add_argument("--seed", type=int, help=f"Root seed. Default: scenario, then {config.SEED}.")
        p.add_argument("--param", type=_param, action="append", metavar="NAME=VALUE", help="Override an action/intervention parameter.")
        p.add_argument("--out", type=pathlib.Path, help=out_help)
        p.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS, help="Log debug messages.")

    p = sub.add_parser("simulate", help="Simulate one dataset and its network.")
    common(p, "Data CSV path; the network goes to <stem>_network.csv.")
    p.add_argument("--action", help="Simulate counterfactual data under this action.")
    p.add_argument("--replicate", type=int, default=0, help="Replicate index of the substreams.")
    p.set_defaults(func=cmd_simulate, require_out=True)

    p = sub.add_parser("truth", help="Monte-Carlo psi0 (or ATE with --action0).")
    common(p, "Optional per-replicate CSV.")
    p.add_argument("--action", help="Action whose outcome mean is the target.")
    p.add_argument("--action0", help="Comparison action: report the coupled ATE action - action0.")
    p.add_argument("--reps", type=int, help="Monte-Carlo replicates.")
    p.add_argument("--threads", type=int, help=f"Worker processes. Default: ${config.THREADS_ENV}, then 1.")
    p.set_defaults(func=cmd_truth, require_out=False)

    p = sub.add_parser("estimate", help="Estimate psi0 on one dataset.")
    common(p, "Estimate report CSV.")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", type=pathlib.Path, help="Data CSV (as written by simulate).")
    source.add_argument("--simulate-fresh", action="store_true", help="Simulate the dataset from the scenario.")
    p.add_argument("--net", type=pathlib.Path, help="Network CSV. Default: <data stem>_network.csv if present.")
    p.add_argument("--replicate", type=int, default=0, help="Replicate index for --simulate-fresh.")
    p.add_argument("--n-boot", type=int, help="Parametric bootstrap samples (0 = off).")
    p.add_argument("--threads", type=int, help="Worker processes for the bootstrap.")
    p.set_defaults(func=cmd_estimate, require_out=True)

    for name, func, text in (
        ("experiment", cmd_experiment, "Replicated estimator benchmark against psi0."),
        ("sweep", cmd_sweep, "Benchmark over interpolated model constants."),
    ):
        p = sub.add_parser(name, help=text)
        common(p, "Metrics CSV." if name == "experiment" else "Per-scenario summary CSV.")
        p.add_argument("--action", help="Target action.")
        p.add_argument("--reps", type=int, help="Observed datasets per scenario.")
        p.add_argument("--truth-reps", type=int, help="Replicates behind each psi0.")
        p.add_argument("--n-boot", type=int, help="Parametric bootstrap samples (0 = off).")
        p.add_argument("--threads", type=int, help="Worker processes for replicates.")
        if name == "sweep":
            p.add_argument("--k", type=int, help="Number of scenarios.")
            p.add_argument("--metrics", type=pathlib.Path, help="Optional long-format metrics CSV.")
        p.set_defaults(func=func, require_out=True)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.require_out and args.out is None:
            parser.error(f"{args.command} requires --out")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    del args.require_out

    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except NetsemError as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME
    except Exception as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


def cli(argv: Sequence[str] | None = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    cli()
