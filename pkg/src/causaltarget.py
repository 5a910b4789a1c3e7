"""
Monte-Carlo gold standards.

psi0 = E[(1/N) sum_i Y_i*] is approximated by averaging the outcome mean of
many counterfactual samples of fixed size N. Each replicate r draws a fresh
network and fresh unit data from the "truth" substreams of replicate r, so any
prefix of replicates is reproducible and parallel runs match serial runs.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import List, Mapping, Optional

import numpy as np
from joblib import Parallel, delayed

from src.errors import ModelError, ParameterError
from src.semodel import DagModel
from src.simengine import run_steps

logger = logging.getLogger(__name__)

TRUTH_DOMAIN = "truth"
BLOCK_SIZE = 50


@dataclasses.dataclass
class TargetResult:
    parameter: str
    value: float
    mc_se: float
    reps: int
    n: int
    seed: int
    replicates: Optional[np.ndarray] = None

    def summary(self) -> str:
        return f"{self.parameter}: {self.value:.6f} (MC SE {self.mc_se:.6f}, R={self.reps}, N={self.n})"


def _check_outcome(model: DagModel, outcome: str, action_names: List[Optional[str]]) -> None:
    if outcome not in model.column_names():
        raise ModelError(f"outcome {outcome!r} is not a node of model {model.name!r}")
    spec = model.node(outcome)
    if len(spec.names) > 1:
        raise ModelError(f"outcome {outcome!r} belongs to multivariate node {list(spec.names)}")
    if spec.distr.startswith("rcat"):
        raise ModelError(f"outcome {outcome!r} is categorical; psi0 needs a binary or continuous outcome")
    for name in action_names:
        if name is not None:
            model.action(name)


def _block_means(model, action_name, params, n, seed, outcome, start, stop) -> np.ndarray:
    action = model.action(action_name, **(params or {})) if action_name else None
    out = np.empty(stop - start)
    for k, r in enumerate(range(start, stop)):
        data = run_steps(model, action, n, seed, replicate=r, domain=TRUTH_DOMAIN)
        out[k] = float(np.mean(data[outcome]))
    return out


def replicate_means(
    model: DagModel,
    action_name: Optional[str],
    n: int,
    reps: int,
    seed: int,
    outcome: str,
    params: Mapping[str, float] | None = None,
    threads: int = 1,
) -> np.ndarray:
    """Outcome mean of each replicate 0..reps-1, ordered by replicate index."""
    blocks = [(s, min(s + BLOCK_SIZE, reps)) for s in range(0, reps, BLOCK_SIZE)]
    if threads > 1 and len(blocks) > 1:
        parts = Parallel(n_jobs=threads)(
            delayed(_block_means)(model, action_name, params, n, seed, outcome, a, b) for a, b in blocks
        )
    else:
        parts = [_block_means(model, action_name, params, n, seed, outcome, a, b) for a, b in blocks]
    return np.concatenate(parts) if parts else np.empty(0)


def _result(parameter: str, values: np.ndarray, n: int, seed: int, keep: bool) -> TargetResult:
    reps = values.size
    se = float(np.std(values, ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
    return TargetResult(parameter, float(values.mean()), se, reps, n, seed, values if keep else None)


def mc_target_mean(
    model: DagModel,
    action_name: Optional[str],
    n: int,
    reps: int,
    seed: int,
    outcome: str | None = None,
    params: Mapping[str, float] | None = None,
    threads: int = 1,
    keep_replicates: bool = False,
) -> TargetResult:
    """psi0 under `action_name` (None = observed-data law) at fixed sample size n."""
    if reps < 1:
        raise ParameterError(f"reps must be at least 1, got {reps}")
    if not model.finalized:
        raise ModelError(f"model {model.name!r} must be finalized")
    outcome = outcome or model.outcome
    _check_outcome(model, outcome, [action_name])
    values = replicate_means(model, action_name, n, reps, seed, outcome, params, threads)
    label = f"E[mean({outcome})|{action_name or 'observed'}]"
    result = _result(label, values, n, seed, keep_replicates)
    logger.info("%s", result.summary())
    return result


def ate(
    model: DagModel,
    action1: Optional[str],
    action0: Optional[str],
    n: int,
    reps: int,
    seed: int,
    outcome: str | None = None,
    params: Mapping[str, float] | None = None,
    threads: int = 1,
    keep_replicates: bool = False,
) -> TargetResult:
    """
    Coupled average effect: replicate r simulates both actions from the same
    substreams (same network and baseline draws) and records the difference of
    outcome means.
    """
    if reps < 1:
        raise ParameterError(f"reps must be at least 1, got {reps}")
    if not model.finalized:
        raise ModelError(f"model {model.name!r} must be finalized")
    outcome = outcome or model.outcome
    _check_outcome(model, outcome, [action1, action0])
    ones = replicate_means(model, action1, n, reps, seed, outcome, _known(model, action1, params), threads)
    zeros = replicate_means(model, action0, n, reps, seed, outcome, _known(model, action0, params), threads)
    label = f"ATE({outcome}: {action1 or 'observed'} - {action0 or 'observed'})"
    result = _result(label, ones - zeros, n, seed, keep_replicates)
    logger.info("%s", result.summary())
    return result


def _known(model: DagModel, action_name: Optional[str], params: Mapping[str, float] | None) -> dict:
    """Keep only the overrides an action declares, so one override set can serve two actions."""
    if not action_name or not params:
        return {}
    declared = model.action(action_name).params
    return {k: v for k, v in params.items() if k in declared}
