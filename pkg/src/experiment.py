"""
Replicated estimator benchmarks against Monte-Carlo gold standards.

Responsibilities:
- simulate `reps` observed datasets (replicate r uses the "sim" substreams of r)
- run every configured estimator plus the oracle counterfactual mean
- summarize bias, MSE, variance and CI coverage against psi0
- sweep model constants over equally spaced scenarios
- write metrics tables as CSV (plain and x10-scaled values)
"""

from __future__ import annotations

import dataclasses
import logging
import pathlib
import warnings
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from src.causaltarget import mc_target_mean
from src.csvio import write_rows_atomic
from src.errors import NetsemError, ParameterError
from src.estimators import EstimateReport, EstimationConfig, estimate_all
from src.semodel import DagModel
from src.simengine import simulate_action, simulate_observed

logger = logging.getLogger(__name__)

ORACLE = "oracle"
SCALE = 10.0

METRIC_COLUMNS = [
    "scenario",
    "estimator",
    "psi0",
    "mean_est",
    "bias",
    "mse",
    "variance",
    "cover_iid",
    "cover_boot",
    "reps",
    "n",
    "seed",
    "bias_x10",
    "mse_x10",
    "variance_x10",
    "mean_var_iid",
    "mean_var_boot",
    "failed",
    "warnings",
]


@dataclasses.dataclass
class ReplicateResult:
    replicate: int
    reports: Dict[str, EstimateReport] = dataclasses.field(default_factory=dict)
    error: Optional[str] = None
    warnings: int = 0

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclasses.dataclass
class EstimatorMetrics:
    scenario: str
    estimator: str
    psi0: float
    mean_est: float
    bias: float
    mse: float
    variance: float
    cover_iid: float
    cover_boot: float
    reps: int
    n: int
    seed: int
    mean_var_iid: float
    mean_var_boot: float
    failed: int
    warnings: int

    def row(self) -> List[object]:
        return [
            self.scenario,
            self.estimator,
            self.psi0,
            self.mean_est,
            self.bias,
            self.mse,
            self.variance,
            self.cover_iid,
            self.cover_boot,
            self.reps,
            self.n,
            self.seed,
            self.bias * SCALE,
            self.mse * SCALE,
            self.variance * SCALE,
            self.mean_var_iid,
            self.mean_var_boot,
            self.failed,
            self.warnings,
        ]


@dataclasses.dataclass
class ExperimentResult:
    scenario: str
    psi0: float
    psi0_se: float
    metrics: List[EstimatorMetrics]
    replicates: List[ReplicateResult]

    def metric(self, estimator: str) -> EstimatorMetrics:
        for m in self.metrics:
            if m.estimator == estimator:
                return m
        raise KeyError(f"no metrics for estimator {estimator!r}")

    @property
    def failures(self) -> List[ReplicateResult]:
        return [r for r in self.replicates if r.failed]


def run_replicate(
    model: DagModel,
    action_name: str,
    config: EstimationConfig,
    n: int,
    seed: int,
    replicate: int,
    params: Mapping[str, float] | None = None,
    oracle: bool = True,
) -> ReplicateResult:
    """One observed dataset, every estimator on it, and (optionally) the coupled oracle mean."""
    result = ReplicateResult(replicate)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            data = simulate_observed(model, n, seed, replicate)
            for report in estimate_all(data, config.with_params(**(params or {})), seed, replicate):
                result.reports[report.estimator] = report
            if oracle:
                known = {k: v for k, v in (params or {}).items() if k in model.action(action_name).params}
                counterfactual = simulate_action(model, action_name, n, seed, replicate, known)
                value = float(np.mean(counterfactual[config.outcome]))
                result.reports[ORACLE] = EstimateReport(ORACLE, value, np.nan, n)
        except NetsemError as exc:
            result.reports.clear()
            result.error = f"{type(exc).__name__}: {exc}"
            logger.warning("replicate %d failed: %s", replicate, result.error)
        except Exception as exc:
            result.reports.clear()
            result.error = f"{type(exc).__name__}: {exc}"
            logger.exception("replicate %d failed unexpectedly", replicate)
    result.warnings = len(caught)
    return result


def _run_block(model, action_name, config, n, seed, start, stop, params, oracle) -> List[ReplicateResult]:
    return [run_replicate(model, action_name, config, n, seed, r, params, oracle) for r in range(start, stop)]


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def summarize(
    scenario: str,
    estimator: str,
    psi0: float,
    replicates: Sequence[ReplicateResult],
    n: int,
    seed: int,
) -> EstimatorMetrics:
    reports = [r.reports[estimator] for r in replicates if estimator in r.reports]
    est = np.array([rep.estimate for rep in reports])
    k = est.size
    if k == 0:
        nan = float("nan")
        return EstimatorMetrics(scenario, estimator, psi0, nan, nan, nan, nan, nan, nan, 0, n, seed, nan, nan,
                                len(replicates), 0)
    cover_iid = [rep.covers(psi0, "iid") for rep in reports]
    cover_boot = [rep.covers(psi0, "boot") for rep in reports]
    return EstimatorMetrics(
        scenario=scenario,
        estimator=estimator,
        psi0=psi0,
        mean_est=float(est.mean()),
        bias=float(est.mean() - psi0),
        mse=float(np.mean((est - psi0) ** 2)),
        variance=float(np.var(est, ddof=1)) if k > 1 else 0.0,
        cover_iid=_mean([c for c in cover_iid if c is not None]),
        cover_boot=_mean([c for c in cover_boot if c is not None]),
        reps=k,
        n=n,
        seed=seed,
        mean_var_iid=_mean([rep.var_iid for rep in reports if not np.isnan(rep.var_iid)]),
        mean_var_boot=_mean([rep.var_boot for rep in reports if rep.var_boot is not None]),
        failed=len(replicates) - k,
        warnings=sum(r.warnings for r in replicates),
    )


def run_experiment(
    model: DagModel,
    action_name: str,
    config: EstimationConfig,
    n: int,
    reps: int,
    seed: int,
    truth_reps: int,
    params: Mapping[str, float] | None = None,
    threads: int = 1,
    oracle: bool = True,
    psi0: float | None = None,
    scenario: str = "base",
    block_size: int = 10,
) -> ExperimentResult:
    """
    psi0 comes from `truth_reps` counterfactual replicates of the action at the
    same parameters (unless given); `reps` observed datasets are then estimated
    and summarized per estimator. Failed replicates are kept in the result and
    counted in the metrics.
    """
    if reps < 1:
        raise ParameterError(f"reps must be at least 1, got {reps}")
    model.action(action_name)
    psi0_se = 0.0
    if psi0 is None:
        known = {k: v for k, v in (params or {}).items() if k in model.action(action_name).params}
        target = mc_target_mean(model, action_name, n, truth_reps, seed, config.outcome, known, threads)
        psi0, psi0_se = target.value, target.mc_se
    blocks = [(s, min(s + block_size, reps)) for s in range(0, reps, block_size)]
    if threads > 1 and len(blocks) > 1:
        parts = Parallel(n_jobs=threads)(
            delayed(_run_block)(model, action_name, config, n, seed, a, b, params, oracle) for a, b in blocks
        )
    else:
        parts = [_run_block(model, action_name, config, n, seed, a, b, params, oracle) for a, b in blocks]
    replicates = [r for part in parts for r in part]
    names = list(config.estimators) + ([ORACLE] if oracle else [])
    metrics = [summarize(scenario, name, psi0, replicates, n, seed) for name in names]
    failed = sum(r.failed for r in replicates)
    logger.info("%s: psi0=%.6f, %d replicates, %d failed", scenario, psi0, reps, failed)
    return ExperimentResult(scenario, psi0, psi0_se, metrics, replicates)


# --- sweep -----------------------------------------------------------------


def interpolate(start: Mapping[str, float], end: Mapping[str, float], k: int) -> List[Dict[str, float]]:
    """k equally spaced points from `start` to `end` (both included when k >= 2)."""
    if k < 1:
        raise ParameterError(f"need at least one scenario, got k={k}")
    if set(start) != set(end):
        raise ParameterError(f"start and end name different constants: {sorted(start)} vs {sorted(end)}")
    if k == 1:
        return [dict(start)]
    points = []
    for i in range(k):
        t = i / (k - 1)
        points.append({name: start[name] * (1.0 - t) + end[name] * t for name in start})
    return points


@dataclasses.dataclass
class SweepResult:
    coefficients: List[Dict[str, float]]
    experiments: List[ExperimentResult]

    def rows(self) -> tuple[List[str], List[List[object]]]:
        """One row per scenario: coefficients, psi0 and per-estimator summaries side by side."""
        names = list(self.coefficients[0]) if self.coefficients else []
        estimators = [m.estimator for m in self.experiments[0].metrics] if self.experiments else []
        header = ["scenario", *names, "psi0"]
        for est in estimators:
            header += [f"{est}_{c}" for c in ("mean_est", "bias", "variance", "var_iid", "var_boot", "cover_iid", "cover_boot")]
        header += ["reps", "n", "seed", "failed"]
        body = []
        for coefs, exp in zip(self.coefficients, self.experiments):
            row: List[object] = [exp.scenario, *[coefs[c] for c in names], exp.psi0]
            for est in estimators:
                m = exp.metric(est)
                row += [m.mean_est, m.bias, m.variance, m.mean_var_iid, m.mean_var_boot, m.cover_iid, m.cover_boot]
            first = exp.metrics[0]
            row += [len(exp.replicates), first.n, first.seed, len(exp.failures)]
            body.append(row)
        return header, body


def scenario_sweep(
    model: DagModel,
    start: Mapping[str, float],
    end: Mapping[str, float],
    k: int,
    action_name: str,
    config: EstimationConfig,
    n: int,
    reps: int,
    seed: int,
    truth_reps: int,
    params: Mapping[str, float] | None = None,
    threads: int = 1,
    oracle: bool = True,
) -> SweepResult:
    """Scenario i uses constants interpolated between `start` and `end`, a fresh psi0 and a full experiment."""
    coefficients = interpolate(start, end, k)
    experiments = []
    for i, coefs in enumerate(coefficients, start=1):
        scenario_model = model.with_constants(**coefs)
        label = f"Scenario {i}"
        logger.info("%s: %s", label, ", ".join(f"{c}={v:g}" for c, v in coefs.items()))
        experiments.append(
            run_experiment(
                scenario_model,
                action_name,
                config,
                n,
                reps,
                seed,
                truth_reps,
                params=params,
                threads=threads,
                oracle=oracle,
                scenario=label,
            )
        )
    return SweepResult(coefficients, experiments)


# --- output ----------------------------------------------------------------


def write_metrics(path: pathlib.Path, results: Sequence[ExperimentResult], comments: Sequence[str] = ()) -> pathlib.Path:
    rows = [m.row() for res in results for m in res.metrics]
    return write_rows_atomic(pathlib.Path(path), METRIC_COLUMNS, rows, comments=comments)


def write_sweep(path: pathlib.Path, sweep: SweepResult, comments: Sequence[str] = ()) -> pathlib.Path:
    header, rows = sweep.rows()
    return write_rows_atomic(pathlib.Path(path), header, rows, comments=comments)


def write_failures(path: pathlib.Path, results: Sequence[ExperimentResult], comments: Sequence[str] = ()) -> pathlib.Path:
    rows = [[res.scenario, r.replicate + 1, r.error] for res in results for r in res.failures]
    return write_rows_atomic(pathlib.Path(path), ["scenario", "replicate", "error"], rows, comments=comments)
