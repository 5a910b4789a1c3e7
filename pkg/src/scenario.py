"""
Scenario files: YAML documents describing a model, its actions, and optional
estimation, experiment and sweep settings.

Formulas are YAML strings parsed at load time, so syntax and reference errors
surface before any simulation. Unknown keys are rejected with the line and
column of the offending key. The schema is documented in docs/grammar.md.
"""

from __future__ import annotations

import dataclasses
import logging
import pathlib
from typing import Any, Dict, List, Mapping, Optional, Sequence

import yaml

from src import exprlang
from src.csvio import write_text_atomic
from src.errors import ExprSyntaxError, ModelError, NetsemError, ScenarioError
from src.estimators import EstimationConfig, InterventionSpec, RegressionSpec, SummarySpec, SummaryTerm
from src.semodel import N_TEST, Action, DagModel, NetworkSpec, NodeSpec

logger = logging.getLogger(__name__)

TOP_KEYS = {"name", "outcome", "constants", "n_test", "network", "nodes", "actions", "estimation", "experiment", "sweep"}
NODE_KEYS = {"name", "distr", "params", "replace_na_w0"}
NETWORK_KEYS = {"name", "generator", "params", "source"}
ACTION_KEYS = {"name", "params", "nodes"}
ESTIMATION_KEYS = {
    "sW",
    "sA",
    "intervention",
    "qform",
    "hform",
    "estimators",
    "max_per_bin",
    "weight_cap",
    "mc_draws",
    "n_boot",
}
INTERVENTION_KEYS = {"params", "nodes"}
TERM_KEYS = {"term", "replace_na_w0"}
EXPERIMENT_KEYS = {"action", "n", "reps", "truth_reps", "seed", "params", "oracle"}
SWEEP_KEYS = {"k", "start", "end"}


# --- loader that remembers where every key was -----------------------------


class _MarkedDict(dict):
    marks: Dict[str, yaml.Mark]
    start: Optional[yaml.Mark] = None


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader: _Loader, node: yaml.MappingNode) -> _MarkedDict:
    loader.flatten_mapping(node)
    out = _MarkedDict()
    out.marks = {}
    out.start = node.start_mark
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        if key in out:
            raise yaml.constructor.ConstructorError(
                "while reading a mapping", node.start_mark, f"duplicate key {key!r}", key_node.start_mark
            )
        out[key] = loader.construct_object(value_node, deep=True)
        out.marks[key] = key_node.start_mark
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


@dataclasses.dataclass
class _Reader:
    path: str

    def fail(self, message: str, where: Any = None, key: str | None = None) -> ScenarioError:
        mark = None
        if isinstance(where, _MarkedDict):
            mark = where.marks.get(key) if key is not None else where.start
            mark = mark or where.start
        if mark is None:
            return ScenarioError(message, self.path)
        return ScenarioError(message, self.path, mark.line + 1, mark.column + 1)

    def mapping(self, value: Any, allowed: set, what: str, required: Sequence[str] = ()) -> Mapping:
        if not isinstance(value, dict):
            raise self.fail(f"{what} must be a mapping, got {type(value).__name__}")
        unknown = sorted(set(value) - allowed)
        if unknown:
            raise self.fail(f"unknown key {unknown[0]!r} in {what}; allowed: {sorted(allowed)}", value, unknown[0])
        for key in required:
            if key not in value:
                raise self.fail(f"{what} is missing {key!r}", value)
        return value

    def sequence(self, value: Any, what: str) -> list:
        if value is None:
            return []
        if not isinstance(value, list):
            raise self.fail(f"{what} must be a list, got {type(value).__name__}")
        return value

    def numbers(self, value: Any, what: str) -> Dict[str, float]:
        if value is None:
            return {}
        if not isinstance(value, dict):
            raise self.fail(f"{what} must be a mapping of names to numbers")
        out = {}
        for k, v in value.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise self.fail(f"{what}: {k!r} must be a number, got {v!r}", value, k)
            out[str(k)] = float(v)
        return out

    # model pieces

    def node(self, raw: Any, what: str) -> NodeSpec:
        entry = self.mapping(raw, NODE_KEYS, what, required=("name", "distr"))
        params = entry.get("params") or {}
        if not isinstance(params, dict):
            raise self.fail(f"{what}: params must be a mapping", entry, "params")
        try:
            return NodeSpec.build(entry["name"], entry["distr"], bool(entry.get("replace_na_w0", False)), **params)
        except NetsemError as exc:
            raise self.fail(f"{what}: {exc}", entry, "params") from exc

    def network(self, raw: Any, base: pathlib.Path) -> NetworkSpec:
        entry = self.mapping(raw, NETWORK_KEYS, "network", required=("generator",))
        params = entry.get("params") or {}
        source = entry.get("source")
        if source is not None:
            source = str((base / source).resolve()) if not pathlib.Path(source).is_absolute() else source
        try:
            return NetworkSpec.build(entry.get("name", "net"), entry["generator"], source=source, **params)
        except NetsemError as exc:
            raise self.fail(str(exc), entry, "generator") from exc

    def action(self, raw: Any) -> Action:
        entry = self.mapping(raw, ACTION_KEYS, "action", required=("name", "nodes"))
        name = entry["name"]
        nodes = tuple(self.node(n, f"action {name!r} node") for n in self.sequence(entry["nodes"], f"action {name!r} nodes"))
        return Action(name, nodes, self.numbers(entry.get("params"), f"action {name!r} params"))

    # estimation pieces

    def terms(self, raw: Any, what: str) -> List[SummaryTerm]:
        out = []
        for item in self.sequence(raw, what):
            try:
                if isinstance(item, str):
                    out.append(SummaryTerm.parse(item))
                else:
                    entry = self.mapping(item, TERM_KEYS, what, required=("term",))
                    out.append(SummaryTerm.parse(entry["term"], bool(entry.get("replace_na_w0", False))))
            except NetsemError as exc:
                if isinstance(exc, ScenarioError):
                    raise
                raise self.fail(f"{what}: {exc}", item if isinstance(item, dict) else None) from exc
        return out

    def estimation(self, raw: Any) -> EstimationConfig:
        entry = self.mapping(raw, ESTIMATION_KEYS, "estimation", required=("sA", "intervention", "qform"))
        iv = self.mapping(entry["intervention"], INTERVENTION_KEYS, "intervention", required=("nodes",))
        nodes = []
        for item in self.sequence(iv["nodes"], "intervention nodes"):
            if isinstance(item, _MarkedDict) and "distr" not in item:
                marked = _MarkedDict(item, distr="rconst")
                marked.marks, marked.start = item.marks, item.start
                item = marked
            nodes.append(self.node(item, "intervention node"))
        intervention = InterventionSpec(tuple(nodes), self.numbers(iv.get("params"), "intervention params"))
        try:
            summaries = SummarySpec(tuple(self.terms(entry.get("sW"), "sW")), tuple(self.terms(entry["sA"], "sA")))
            return EstimationConfig(
                summaries=summaries,
                intervention=intervention,
                qform=RegressionSpec.parse(entry["qform"]),
                hform=RegressionSpec.parse(entry["hform"]) if entry.get("hform") else None,
                estimators=tuple(entry.get("estimators", ("gcomp", "ipw"))),
                max_per_bin=int(entry.get("max_per_bin", 50)),
                weight_cap=float(entry.get("weight_cap", 50.0)),
                mc_draws=int(entry.get("mc_draws", 1)),
                n_boot=int(entry.get("n_boot", 0)),
            )
        except ScenarioError:
            raise
        except NetsemError as exc:
            raise self.fail(f"estimation: {exc}", entry) from exc


@dataclasses.dataclass
class ExperimentSettings:
    action: Optional[str] = None
    n: Optional[int] = None
    reps: Optional[int] = None
    truth_reps: Optional[int] = None
    seed: Optional[int] = None
    params: Dict[str, float] = dataclasses.field(default_factory=dict)
    oracle: bool = True


@dataclasses.dataclass
class SweepSettings:
    k: int
    start: Dict[str, float]
    end: Dict[str, float]


@dataclasses.dataclass
class Scenario:
    path: pathlib.Path
    model: DagModel
    estimation: Optional[EstimationConfig] = None
    experiment: ExperimentSettings = dataclasses.field(default_factory=ExperimentSettings)
    sweep: Optional[SweepSettings] = None
    n_test: int = N_TEST


def load_scenario(path: pathlib.Path, finalize: bool = True) -> Scenario:
    """Read, validate and (by default) finalize the scenario at `path`."""
    path = pathlib.Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", str(path)) from exc
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        problem = getattr(exc, "problem", None) or str(exc)
        if mark is not None:
            raise ScenarioError(f"YAML syntax error: {problem}", str(path), mark.line + 1, mark.column + 1) from exc
        raise ScenarioError(f"YAML syntax error: {problem}", str(path)) from exc

    r = _Reader(str(path))
    top = r.mapping(doc, TOP_KEYS, "scenario", required=("nodes",))
    model = DagModel(
        name=str(top.get("name", path.stem)),
        constants=r.numbers(top.get("constants"), "constants"),
        outcome=top.get("outcome"),
    )
    base = path.parent
    try:
        if top.get("network") is not None:
            model.add_network(r.network(top["network"], base))
        for item in r.sequence(top["nodes"], "nodes"):
            if isinstance(item, dict) and set(item) == {"network"}:
                model.add_network(r.network(item["network"], base))
                continue
            spec = r.node(item, "node")
            try:
                model.add_node(spec)
            except ModelError as exc:
                raise r.fail(str(exc), item, "name") from exc
        for item in r.sequence(top.get("actions"), "actions"):
            act = r.action(item)
            try:
                model.add_action(act)
            except ModelError as exc:
                raise r.fail(str(exc), item, "name") from exc
    except (ExprSyntaxError, ModelError) as exc:
        raise ScenarioError(str(exc), str(path)) from exc

    n_test = int(top.get("n_test", N_TEST))
    scenario = Scenario(path=path, model=model, n_test=n_test)
    if top.get("estimation") is not None:
        scenario.estimation = r.estimation(top["estimation"])
    if top.get("experiment") is not None:
        exp = r.mapping(top["experiment"], EXPERIMENT_KEYS, "experiment")
        scenario.experiment = ExperimentSettings(
            action=exp.get("action"),
            n=exp.get("n"),
            reps=exp.get("reps"),
            truth_reps=exp.get("truth_reps"),
            seed=exp.get("seed"),
            params=r.numbers(exp.get("params"), "experiment params"),
            oracle=bool(exp.get("oracle", True)),
        )
        if scenario.experiment.action is not None:
            try:
                model.action(scenario.experiment.action)
            except ModelError as exc:
                raise r.fail(str(exc), exp, "action") from exc
    if top.get("sweep") is not None:
        sw = r.mapping(top["sweep"], SWEEP_KEYS, "sweep", required=("start", "end"))
        start, end = r.numbers(sw["start"], "sweep start"), r.numbers(sw["end"], "sweep end")
        unknown = sorted((set(start) | set(end)) - set(model.constants))
        if unknown:
            raise r.fail(f"sweep names unknown constant(s) {unknown}", sw)
        scenario.sweep = SweepSettings(int(sw.get("k", 9)), start, end)

    if finalize:
        model.finalize(n_test)
    logger.info("loaded scenario %s (%d nodes, %d actions)", path, len(model.nodes), len(model.actions))
    return scenario


# --- saving ----------------------------------------------------------------


def _literal(expr: exprlang.Expression) -> Optional[float]:
    if isinstance(expr, exprlang.Num):
        return expr.value
    if isinstance(expr, exprlang.UnaryOp) and expr.op == "-" and isinstance(expr.operand, exprlang.Num):
        return -expr.operand.value
    return None


def _params_text(params: Mapping[str, exprlang.Expression]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for k, expr in params.items():
        if _literal(expr) is not None:
            out[k] = _literal(expr)
        elif isinstance(expr, exprlang.Call) and expr.func == "c" and all(_literal(a) is not None for a in expr.args):
            out[k] = [_literal(a) for a in expr.args]
        else:
            out[k] = exprlang.to_text(expr)
    return out


def _node_doc(spec: NodeSpec) -> Dict[str, Any]:
    doc: Dict[str, Any] = {"name": spec.name if len(spec.names) == 1 else list(spec.names), "distr": spec.distr}
    if spec.params:
        doc["params"] = _params_text(spec.params)
    if spec.replace_na_w0:
        doc["replace_na_w0"] = True
    return doc


def _network_doc(spec: NetworkSpec) -> Dict[str, Any]:
    doc: Dict[str, Any] = {"name": spec.name, "generator": spec.generator}
    if spec.params:
        doc["params"] = _params_text(spec.params)
    if spec.source:
        doc["source"] = spec.source
    return doc


def _term_doc(term: SummaryTerm):
    if not term.replace_na_w0:
        return term.to_text()
    return {"term": term.to_text(), "replace_na_w0": True}


def scenario_document(scenario: Scenario) -> Dict[str, Any]:
    model = scenario.model
    doc: Dict[str, Any] = {"name": model.name}
    if model.outcome_name:
        doc["outcome"] = model.outcome_name
    if model.constants:
        doc["constants"] = dict(model.constants)
    doc["n_test"] = scenario.n_test
    doc["nodes"] = [
        {"network": _network_doc(s)} if isinstance(s, NetworkSpec) else _node_doc(s) for s in model.steps
    ]
    if model.actions:
        doc["actions"] = [
            {"name": a.name, "params": dict(a.params), "nodes": [_node_doc(n) for n in a.nodes]}
            for a in model.actions.values()
        ]
    est = scenario.estimation
    if est is not None:
        doc["estimation"] = {
            "sW": [_term_doc(t) for t in est.summaries.sW],
            "sA": [_term_doc(t) for t in est.summaries.sA],
            "intervention": {
                "params": dict(est.intervention.params),
                "nodes": [_node_doc(n) for n in est.intervention.nodes],
            },
            "qform": est.qform.to_text(),
            "estimators": list(est.estimators),
            "max_per_bin": est.max_per_bin,
            "weight_cap": est.weight_cap,
            "mc_draws": est.mc_draws,
            "n_boot": est.n_boot,
        }
        if est.hform is not None:
            doc["estimation"]["hform"] = est.hform.to_text()
    exp = {k: v for k, v in dataclasses.asdict(scenario.experiment).items() if v not in (None, {})}
    if exp:
        doc["experiment"] = exp
    if scenario.sweep is not None:
        doc["sweep"] = dataclasses.asdict(scenario.sweep)
    return doc


def save_scenario(scenario: Scenario, path: pathlib.Path) -> pathlib.Path:
    """Write `scenario` back as YAML; loading the result gives the same model."""
    path = pathlib.Path(path)
    text = yaml.safe_dump(scenario_document(scenario), sort_keys=False, allow_unicode=True, default_flow_style=False)
    write_text_atomic(path, text)
    return path
