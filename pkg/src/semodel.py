"""
Structural equation model over connected units.

A DagModel is an ordered list of steps: node specs (one conditional
distribution per node, parameters given as formulas over earlier nodes) and at
most one active network declaration. Actions replace some node specs to define
counterfactual distributions; the base model is never modified by them.

Distributions sample by inverse CDF from one uniform per unit, so the uniform
is the unit's exogenous error for that node.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from src import exprlang
from src.errors import (
    EvaluationError,
    ExprSyntaxError,
    ModelError,
    NetsemError,
    NetworkOverrideWarning,
    ValidationError,
)
from src.exprlang import Expression

logger = logging.getLogger(__name__)

N_TEST = 200
FINALIZE_SEED = 20160101
PROB_SUM_TOL = 1e-8


# --- distributions ---------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Distribution:
    name: str
    params: Tuple[str, ...]
    defaults: Mapping[str, float]
    kind: str  # binary | categorical | continuous
    sampler: Callable  # (node, params: dict[str, array], u: array) -> array


DISTRIBUTIONS: Dict[str, Distribution] = {}


def register_distribution(
    name: str,
    params: Sequence[str],
    sampler: Callable,
    kind: str = "continuous",
    defaults: Mapping[str, float] | None = None,
) -> None:
    """Extension point: add a sampler taking (node, params, uniforms)."""
    DISTRIBUTIONS[name] = Distribution(name, tuple(params), dict(defaults or {}), kind, sampler)


def _first_bad(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0])


def _rbern(node: str, params: Mapping[str, np.ndarray], u: np.ndarray) -> np.ndarray:
    prob = params["prob"]
    bad = ~np.isnan(prob) & ((prob < 0.0) | (prob > 1.0))
    if bad.any():
        i = _first_bad(bad)
        raise EvaluationError(f"rbern prob {prob[i]} outside [0, 1] for unit {i + 1}", node)
    out = (u < prob).astype(float)
    out[np.isnan(prob)] = np.nan
    return out


def _rnorm(node: str, params: Mapping[str, np.ndarray], u: np.ndarray) -> np.ndarray:
    mean, sd = params["mean"], params["sd"]
    bad = ~np.isnan(sd) & (sd <= 0.0)
    if bad.any():
        i = _first_bad(bad)
        raise EvaluationError(f"rnorm sd {sd[i]} must be positive for unit {i + 1}", node)
    return mean + sd * special.ndtri(u)


def _runif(node: str, params: Mapping[str, np.ndarray], u: np.ndarray) -> np.ndarray:
    lo, hi = params["min"], params["max"]
    bad = hi < lo
    if bad.any():
        i = _first_bad(bad)
        raise EvaluationError(f"runif max {hi[i]} below min {lo[i]} for unit {i + 1}", node)
    return lo + (hi - lo) * u


def _categorical(base: int) -> Callable:
    def sampler(node: str, params: Mapping[str, np.ndarray], u: np.ndarray) -> np.ndarray:
        probs = params["probs"]
        if probs.ndim == 1:
            probs = probs[:, None]
        missing = np.isnan(probs).any(axis=1)
        bad = ~missing & ((probs < 0.0) | (probs > 1.0)).any(axis=1)
        if bad.any():
            i = _first_bad(bad)
            raise EvaluationError(f"categorical probs {probs[i].tolist()} outside [0, 1] for unit {i + 1}", node)
        totals = probs.sum(axis=1)
        bad = ~missing & (np.abs(totals - 1.0) > PROB_SUM_TOL)
        if bad.any():
            i = _first_bad(bad)
            raise EvaluationError(f"categorical probs sum to {totals[i]!r}, not 1, for unit {i + 1}", node)
        cum = np.cumsum(probs, axis=1)[:, :-1]
        out = (u[:, None] >= cum).sum(axis=1).astype(float) + base
        out[missing] = np.nan
        return out

    return sampler


def _rconst(node: str, params: Mapping[str, np.ndarray], u: np.ndarray) -> np.ndarray:
    return params["const"].astype(float, copy=True)


register_distribution("rbern", ["prob"], _rbern, kind="binary")
register_distribution("rnorm", ["mean", "sd"], _rnorm, defaults={"mean": 0.0, "sd": 1.0})
register_distribution("runif", ["min", "max"], _runif, defaults={"min": 0.0, "max": 1.0})
register_distribution("rcat.b0", ["probs"], _categorical(0), kind="categorical")
register_distribution("rcat.b1", ["probs"], _categorical(1), kind="categorical")
register_distribution("rconst", ["const"], _rconst)


def sample_distribution(distr: str, params: Mapping[str, object], u: np.ndarray, node: str = "?") -> np.ndarray:
    """
    Draw one value per unit. `params` holds evaluated formulas (scalars,
    length-n columns, or n x K matrices for categorical probs); `u` holds the
    units' uniforms.
    """
    dist = DISTRIBUTIONS.get(distr)
    if dist is None:
        raise ModelError(f"unknown distribution {distr!r} for node {node!r}")
    n = u.shape[0]
    values = {}
    for name in dist.params:
        if name in params:
            raw = params[name]
        elif name in dist.defaults:
            raw = dist.defaults[name]
        else:
            raise EvaluationError(f"{distr} requires parameter {name!r}", node)
        arr = np.asarray(raw, dtype=float)
        if name == "probs":
            # c(p1, ..., pK) of constants evaluates to 1 x K; per-unit probs are n x K
            if arr.ndim < 2:
                arr = arr.reshape(1, -1)
            if arr.shape[0] not in (1, n):
                raise EvaluationError(f"probs has shape {arr.shape}, expected (n, K)", node)
            arr = np.broadcast_to(arr, (n, arr.shape[1]))
        elif arr.ndim == 0:
            arr = np.full(n, float(arr))
        elif arr.ndim != 1 or arr.shape[0] != n:
            raise EvaluationError(f"parameter {name!r} of {distr} has shape {arr.shape}, expected ({n},)", node)
        values[name] = arr
    return dist.sampler(node, values, u)


# --- specs -----------------------------------------------------------------


def _as_expression(value, where: str) -> Expression:
    if isinstance(value, (list, tuple)):
        return exprlang.Call("c", tuple(_as_expression(v, where) for v in value))
    if isinstance(value, exprlang.EXPRESSION_TYPES):
        return value
    try:
        return exprlang.parse(value)
    except ExprSyntaxError as exc:
        raise ModelError(f"{where}: {exc}") from exc


@dataclasses.dataclass(frozen=True)
class NodeSpec:
    names: Tuple[str, ...]
    distr: str
    params: Mapping[str, Expression]
    replace_na_w0: bool = False

    @classmethod
    def build(cls, name: Union[str, Sequence[str]], distr: str, replace_na_w0: bool = False, **params) -> "NodeSpec":
        """NodeSpec.build("W2", "rbern", prob="plogis(-0.2 + W1/3)")"""
        names = (name,) if isinstance(name, str) else tuple(name)
        parsed = {k: _as_expression(v, f"node {names[0]!r} parameter {k!r}") for k, v in params.items()}
        return cls(names, distr, parsed, replace_na_w0)

    @property
    def name(self) -> str:
        return self.names[0]

    def dependencies(self, exclude: Sequence[str] = ()) -> frozenset:
        deps = set()
        for expr in self.params.values():
            deps |= exprlang.dependencies(expr, exclude)
        return frozenset(deps)

    def uses_network(self) -> bool:
        return any(exprlang.uses_network(e) for e in self.params.values())

    def friend_width(self) -> int:
        """Highest explicit friend index any parameter reads (0 if none)."""
        return max((exprlang.max_friend_width(e) for e in self.params.values()), default=0)


GENERATORS = {
    "gnp": ("p",),
    "small_world": ("dim", "nei", "p"),
    "external": (),
}


@dataclasses.dataclass(frozen=True)
class NetworkSpec:
    name: str
    generator: str
    params: Mapping[str, Expression]
    source: Optional[str] = None  # external generator: path to a network CSV

    @classmethod
    def build(cls, name: str, generator: str, source: str | None = None, **params) -> "NetworkSpec":
        if generator not in GENERATORS:
            raise ModelError(f"unknown network generator {generator!r}; expected one of {sorted(GENERATORS)}")
        expected = set(GENERATORS[generator])
        unknown = set(params) - expected
        if unknown:
            raise ModelError(f"network {name!r}: unknown parameter(s) {sorted(unknown)} for {generator}")
        missing = expected - set(params)
        if missing:
            raise ModelError(f"network {name!r}: missing parameter(s) {sorted(missing)} for {generator}")
        if generator == "external" and not source:
            raise ModelError(f"network {name!r}: external generator needs a source path")
        parsed = {k: _as_expression(v, f"network {name!r} parameter {k!r}") for k, v in params.items()}
        return cls(name, generator, parsed, source)

    def dependencies(self, exclude: Sequence[str] = ()) -> frozenset:
        deps = set()
        for expr in self.params.values():
            deps |= exprlang.dependencies(expr, exclude)
        return frozenset(deps)


@dataclasses.dataclass(frozen=True)
class Action:
    name: str
    nodes: Tuple[NodeSpec, ...]
    params: Mapping[str, float] = dataclasses.field(default_factory=dict)

    def with_params(self, **overrides: float) -> "Action":
        unknown = set(overrides) - set(self.params)
        if unknown:
            raise ModelError(f"action {self.name!r} has no parameter(s) {sorted(unknown)}")
        return dataclasses.replace(self, params={**self.params, **overrides})

    def replacement(self, name: str) -> Optional[NodeSpec]:
        for spec in self.nodes:
            if spec.name == name:
                return spec
        return None


# --- model -----------------------------------------------------------------


class DagModel:
    """
    Builder for the SEM. Steps run in insertion order; insertion order is a
    topological order because every formula may only read earlier nodes.
    """

    def __init__(self, name: str = "model", constants: Mapping[str, float] | None = None, outcome: str | None = None):
        self.name = name
        self.constants: Dict[str, float] = dict(constants or {})
        self.outcome_name = outcome
        self.steps: List[Union[NodeSpec, NetworkSpec]] = []
        self.actions: Dict[str, Action] = {}
        self.finalized = False

    def __repr__(self) -> str:
        nodes = ", ".join(s.name for s in self.nodes)
        state = "finalized" if self.finalized else "open"
        return f"DagModel({self.name!r}, nodes=[{nodes}], actions={sorted(self.actions)}, {state})"

    # views

    @property
    def nodes(self) -> List[NodeSpec]:
        return [s for s in self.steps if isinstance(s, NodeSpec)]

    @property
    def network(self) -> Optional[NetworkSpec]:
        for s in self.steps:
            if isinstance(s, NetworkSpec):
                return s
        return None

    def node(self, name: str) -> NodeSpec:
        for s in self.nodes:
            if s.name == name or name in s.names:
                return s
        raise ModelError(f"unknown node {name!r}")

    def column_names(self) -> List[str]:
        return [n for s in self.nodes for n in s.names]

    @property
    def outcome(self) -> str:
        if self.outcome_name:
            return self.outcome_name
        if not self.nodes:
            raise ModelError("model has no nodes")
        last = self.nodes[-1]
        if len(last.names) > 1:
            raise ModelError(f"last node {last.names} is multivariate; name the outcome explicitly")
        return last.name

    # construction

    def _check_open(self) -> None:
        if self.finalized:
            raise ModelError(f"model {self.name!r} is finalized and cannot be changed")

    def _defined_before(self, position: int) -> List[str]:
        names: List[str] = []
        for s in self.steps[:position]:
            if isinstance(s, NodeSpec):
                names.extend(s.names)
        return names

    def _network_before(self, position: int) -> bool:
        return any(isinstance(s, NetworkSpec) for s in self.steps[:position])

    def _check_references(self, spec: NodeSpec, position: int, extra: Sequence[str] = ()) -> None:
        defined = self._defined_before(position)
        known = set(defined) | set(self.constants) | set(extra)
        missing = []
        for dep in sorted(spec.dependencies(exclude=known)):
            base, _, suffix = dep.rpartition(".")
            if base and suffix.isdigit() and base in defined:
                continue  # column k of a multivariate node
            missing.append(dep)
        if missing:
            later = [m for m in missing if m in self.column_names()]
            hint = f" (defined after {spec.name!r})" if later else ""
            raise ModelError(f"node {spec.name!r} references undefined {missing}{hint}")
        if spec.uses_network() and not self._network_before(position):
            raise ModelError(f"node {spec.name!r} uses friend references but no network attached")
        self._check_distribution(spec)

    @staticmethod
    def _check_distribution(spec: NodeSpec) -> None:
        dist = DISTRIBUTIONS.get(spec.distr)
        if dist is None:
            raise ModelError(f"node {spec.name!r}: unknown distribution {spec.distr!r}; expected one of {sorted(DISTRIBUTIONS)}")
        unknown = set(spec.params) - set(dist.params)
        if unknown:
            raise ModelError(f"node {spec.name!r}: {spec.distr} has no parameter(s) {sorted(unknown)}")
        missing = set(dist.params) - set(spec.params) - set(dist.defaults)
        if missing:
            raise ModelError(f"node {spec.name!r}: {spec.distr} requires parameter(s) {sorted(missing)}")

    def add_node(self, spec: NodeSpec) -> "DagModel":
        self._check_open()
        existing = set(self.column_names())
        clash = [n for n in spec.names if n in existing or n in self.constants or n in exprlang.RESERVED]
        if clash:
            raise ModelError(f"duplicate node name(s) {clash}")
        self._check_references(spec, len(self.steps))
        self.steps.append(spec)
        logger.debug("added node %s (%s)", spec.names, spec.distr)
        return self

    def add_network(self, spec: NetworkSpec) -> "DagModel":
        self._check_open()
        if spec.generator not in GENERATORS:
            raise ModelError(f"unknown network generator {spec.generator!r}")
        known = set(self.column_names()) | set(self.constants)
        missing = sorted(spec.dependencies(exclude=known))
        if missing:
            raise ModelError(f"network {spec.name!r} references undefined {missing}")
        previous = self.network
        if previous is not None:
            msg = f"network {spec.name!r} replaces network {previous.name!r}"
            warnings.warn(msg, NetworkOverrideWarning, stacklevel=2)
            logger.warning(msg)
            self.steps.remove(previous)
        self.steps.append(spec)
        return self

    def add_action(self, action: Action) -> "DagModel":
        self._check_open()
        if action.name in self.actions:
            raise ModelError(f"duplicate action name {action.name!r}")
        positions = {n: i for i, s in enumerate(self.steps) if isinstance(s, NodeSpec) for n in s.names}
        for spec in action.nodes:
            if spec.name not in positions:
                raise ModelError(f"action {action.name!r} replaces unknown node {spec.name!r}")
            base = self.node(spec.name)
            if spec.names != base.names:
                raise ModelError(f"action {action.name!r}: replacement for {spec.name!r} must define {list(base.names)}")
            try:
                self._check_references(spec, positions[spec.name], extra=list(action.params))
            except ModelError as exc:
                raise ModelError(f"action {action.name!r}: {exc}") from exc
        self.actions[action.name] = action
        return self

    def action(self, name: str, **overrides: float) -> Action:
        if name not in self.actions:
            raise ModelError(f"unknown action {name!r}; defined: {sorted(self.actions)}")
        act = self.actions[name]
        return act.with_params(**overrides) if overrides else act

    def steps_for(self, action: Action | None) -> List[Union[NodeSpec, NetworkSpec]]:
        if action is None:
            return list(self.steps)
        out: List[Union[NodeSpec, NetworkSpec]] = []
        for s in self.steps:
            if isinstance(s, NodeSpec):
                out.append(action.replacement(s.name) or s)
            else:
                out.append(s)
        return out

    def finalize(self, n_test: int = N_TEST) -> "DagModel":
        """Run a throwaway simulation of n_test units (observed and every action), then freeze."""
        from src import simengine

        if not self.nodes:
            raise ModelError("cannot finalize a model without nodes")
        problems = []
        for action_name in [None, *self.actions]:
            label = "observed data" if action_name is None else f"action {action_name!r}"
            try:
                simengine.run_steps(self, self.actions.get(action_name) if action_name else None, n_test, FINALIZE_SEED)
            except NetsemError as exc:
                problems.append(f"{label}: {exc}")
        if problems:
            raise ValidationError(f"model {self.name!r} failed its {n_test}-unit test simulation", problems)
        self.finalized = True
        logger.info("finalized model %s: %d nodes, %d actions", self.name, len(self.nodes), len(self.actions))
        return self

    def copy(self) -> "DagModel":
        other = DagModel(self.name, self.constants, self.outcome_name)
        other.steps = list(self.steps)
        other.actions = dict(self.actions)
        return other

    def with_constants(self, n_test: int = N_TEST, **values: float) -> "DagModel":
        """A new finalized model with some constants replaced."""
        unknown = set(values) - set(self.constants)
        if unknown:
            raise ModelError(f"model {self.name!r} has no constant(s) {sorted(unknown)}")
        other = self.copy()
        other.constants.update({k: float(v) for k, v in values.items()})
        return other.finalize(n_test) if self.finalized else other


