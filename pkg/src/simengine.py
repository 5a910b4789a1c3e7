"""
Sampling observed and counterfactual data from a DagModel.

For N units the steps of the model run in order:
1) the network is drawn from substream ("network", replicate), with its
   parameter formulas evaluated against the columns simulated so far;
2) every node evaluates its parameter formulas (friend summaries included)
   and samples one value per unit from substream ("node", column, replicate).

An action swaps in replacement node specs and binds its parameters; all other
equations and substreams stay the same, so observed and counterfactual runs
with the same seed share every draw that the intervention does not touch.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import pathlib
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from src import exprlang, netgraph
from src.csvio import read_rows, write_rows_atomic
from src.errors import EvaluationError, ModelError, ParameterError, ValidationError
from src.netgraph import NetworkMatrix
from src.rng import RngStreams
from src.semodel import DISTRIBUTIONS, Action, DagModel, NetworkSpec, NodeSpec, sample_distribution

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    n: int
    columns: Mapping[str, np.ndarray]
    kinds: Mapping[str, str]
    network: Optional[NetworkMatrix] = None
    action: Optional[str] = None

    def __post_init__(self):
        for name, col in self.columns.items():
            if np.shape(col) != (self.n,):
                raise ValidationError("dataset column length mismatch", [f"{name}: {np.shape(col)} != ({self.n},)"])

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise KeyError(f"dataset has no column {name!r}; columns: {list(self.columns)}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def __repr__(self) -> str:
        return f"Dataset(n={self.n}, columns={list(self.columns)}, network={self.network!r}, action={self.action!r})"

    @property
    def names(self) -> List[str]:
        return list(self.columns)

    @property
    def kmax(self) -> int:
        return self.network.kmax if self.network is not None else 0

    @property
    def n_friends(self) -> np.ndarray:
        return self.network.n_friends if self.network is not None else np.zeros(self.n, dtype=np.int64)

    def with_columns(self, values: Mapping[str, np.ndarray], kinds: Mapping[str, str] | None = None) -> "Dataset":
        """Copy with columns added or replaced (existing columns keep their position)."""
        columns = dict(self.columns)
        new_kinds = dict(self.kinds)
        for name, col in values.items():
            columns[name] = np.asarray(col, dtype=float)
            new_kinds[name] = (kinds or {}).get(name, new_kinds.get(name, "continuous"))
        return dataclasses.replace(self, columns=columns, kinds=new_kinds)

    def equals(self, other: "Dataset") -> bool:
        if self.n != other.n or list(self.columns) != list(other.columns):
            return False
        for name in self.columns:
            if not np.array_equal(self.columns[name], other.columns[name], equal_nan=True):
                return False
        if (self.network is None) != (other.network is None):
            return False
        return self.network is None or self.network == other.network


# --- network step ----------------------------------------------------------


def _scalar_param(spec: NetworkSpec, key: str, value) -> float:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr)
    if arr.size and np.all(arr == arr.flat[0]):
        return float(arr.flat[0])
    raise ParameterError(f"network {spec.name!r}: parameter {key!r} must be the same for every unit")


@functools.lru_cache(maxsize=8)
def _read_external(path: str) -> NetworkMatrix:
    return netgraph.read_network_csv(pathlib.Path(path))


def sample_network(
    spec: NetworkSpec,
    n: int,
    columns: Mapping[str, np.ndarray],
    bindings: Mapping[str, float],
    rng: np.random.Generator,
) -> NetworkMatrix:
    ctx = exprlang.EvalContext(n=n, columns=columns, bindings=bindings, node=spec.name)
    values = {k: exprlang.evaluate(e, ctx) for k, e in spec.params.items()}
    if spec.generator == "gnp":
        p = values["p"]
        return netgraph.gen_gnp(n, p if np.ndim(p) else float(p), rng)
    if spec.generator == "small_world":
        dim = int(_scalar_param(spec, "dim", values["dim"]))
        nei = int(_scalar_param(spec, "nei", values["nei"]))
        p = _scalar_param(spec, "p", values["p"])
        return netgraph.gen_small_world(n, dim, nei, p, rng)
    if spec.generator == "external":
        net = _read_external(str(spec.source))
        if net.n != n:
            raise ParameterError(f"network {spec.name!r}: file {spec.source} has {net.n} units, simulation needs {n}")
        return net
    raise ModelError(f"unknown network generator {spec.generator!r}")


# --- node step -------------------------------------------------------------


def _node_columns(spec: NodeSpec, params: Mapping[str, object]) -> tuple[tuple[str, ...], int]:
    widths = {np.shape(v)[1] for k, v in params.items() if k != "probs" and np.ndim(v) == 2}
    if len(widths) > 1:
        raise EvaluationError(f"parameters evaluate to matrices of different widths {sorted(widths)}", spec.name)
    width = widths.pop() if widths else 1
    if len(spec.names) == 1:
        if width == 1:
            return spec.names, 1
        return tuple(f"{spec.name}.{j}" for j in range(1, width + 1)), width
    if width not in (1, len(spec.names)):
        raise EvaluationError(f"{len(spec.names)} names but parameters have {width} columns", spec.name)
    return spec.names, width


def sample_node(
    spec: NodeSpec,
    n: int,
    columns: Dict[str, np.ndarray],
    network: Optional[NetworkMatrix],
    bindings: Mapping[str, float],
    streams: RngStreams,
    replicate: int = 0,
) -> Dict[str, np.ndarray]:
    ctx = exprlang.EvalContext(
        n=n, columns=columns, network=network, bindings=bindings, replace_na_w0=spec.replace_na_w0, node=spec.name
    )
    try:
        params = {k: exprlang.evaluate(e, ctx) for k, e in spec.params.items()}
        names, width = _node_columns(spec, params)
        out: Dict[str, np.ndarray] = {}
        for j, col in enumerate(names):
            col_params = {}
            for key, value in params.items():
                if key != "probs" and np.ndim(value) == 2:
                    value = value[:, j] if width > 1 else value[:, 0]
                col_params[key] = value
            u = streams.uniforms(n, "node", col, replicate)
            out[col] = sample_distribution(spec.distr, col_params, u, node=col)
        return out
    except EvaluationError as exc:
        if exc.node is None:
            raise EvaluationError(str(exc), spec.name) from exc
        raise


def _check_friend_width(network: NetworkMatrix, name: str, steps: Sequence) -> None:
    for step in steps:
        if isinstance(step, NetworkSpec):
            return
        width = step.friend_width()
        if width > network.kmax:
            raise EvaluationError(
                f"reads friend {width} but network {name!r} drew Kmax = {network.kmax}; "
                f"use a denser network, a larger n or a [[1:Kmax]] range",
                step.name,
            )


def run_steps(
    model: DagModel,
    action: Optional[Action],
    n: int,
    seed: int,
    replicate: int = 0,
    domain: str = "sim",
) -> Dataset:
    """Execute every step of the model (or of an action's modified model) for n units."""
    if n < 1:
        raise ParameterError(f"n must be positive, got {n}")
    streams = RngStreams(seed, domain)
    bindings = {**model.constants, **(action.params if action else {})}
    columns: Dict[str, np.ndarray] = {}
    kinds: Dict[str, str] = {}
    network: Optional[NetworkMatrix] = None
    steps = list(model.steps_for(action))
    for k, step in enumerate(steps):
        if isinstance(step, NetworkSpec):
            network = sample_network(step, n, columns, bindings, streams.generator("network", replicate))
            logger.debug("sampled network %s: kmax=%d edges=%d", step.name, network.kmax, network.edge_count())
            _check_friend_width(network, step.name, steps[k + 1:])
            continue
        drawn = sample_node(step, n, columns, network, bindings, streams, replicate)
        columns.update(drawn)
        kind = DISTRIBUTIONS[step.distr].kind
        kinds.update({name: kind for name in drawn})
    return Dataset(n=n, columns=columns, kinds=kinds, network=network, action=action.name if action else None)


def _require_finalized(model: DagModel) -> None:
    if not model.finalized:
        raise ModelError(f"model {model.name!r} must be finalized before simulation")


def simulate_observed(model: DagModel, n: int, seed: int, replicate: int = 0, domain: str = "sim") -> Dataset:
    _require_finalized(model)
    return run_steps(model, None, n, seed, replicate, domain)


def simulate_action(
    model: DagModel,
    action_name: str,
    n: int,
    seed: int,
    replicate: int = 0,
    params: Mapping[str, float] | None = None,
    domain: str = "sim",
) -> Dataset:
    """Counterfactual data under a named action; `params` overrides the action's parameters."""
    _require_finalized(model)
    action = model.action(action_name, **(params or {}))
    return run_steps(model, action, n, seed, replicate, domain)


# --- interchange -----------------------------------------------------------


def network_path_for(data_path: pathlib.Path) -> pathlib.Path:
    data_path = pathlib.Path(data_path)
    return data_path.with_name(f"{data_path.stem}_network.csv")


def export(
    dataset: Dataset,
    destination: pathlib.Path,
    network_destination: pathlib.Path | None = None,
    comments: Sequence[str] = (),
) -> List[pathlib.Path]:
    """Write the data CSV (one row per unit, empty field = MISSING) and, if attached, the network CSV."""
    destination = pathlib.Path(destination)
    names = dataset.names
    rows = ([dataset.columns[c][i] for c in names] for i in range(dataset.n if names else 0))
    written = [write_rows_atomic(destination, names, rows, comments=comments)]
    if dataset.network is not None:
        net_path = pathlib.Path(network_destination) if network_destination else network_path_for(destination)
        written.append(netgraph.write_network_csv(dataset.network, net_path, comments=comments))
    logger.info("exported %d rows to %s", dataset.n, destination)
    return written


def read_dataset(path: pathlib.Path, network_path: pathlib.Path | None = None) -> Dataset:
    rows = list(read_rows(pathlib.Path(path)))
    header = rows[0] if rows else []
    body = [r for r in rows[1:]]
    network = netgraph.read_network_csv(pathlib.Path(network_path)) if network_path else None
    n = len(body) if header else (network.n if network is not None else 0)
    columns: Dict[str, np.ndarray] = {}
    kinds: Dict[str, str] = {}
    for c, name in enumerate(header):
        col = np.array([float(r[c]) if r[c].strip() else np.nan for r in body], dtype=float)
        columns[name] = col
        observed = col[~np.isnan(col)]
        kinds[name] = "binary" if observed.size and np.isin(observed, (0.0, 1.0)).all() else "continuous"
    if network is not None and network.n != n:
        raise ValidationError("dataset and network disagree", [f"{n} data rows vs {network.n} network rows"])
    return Dataset(n=n, columns=columns, kinds=kinds, network=network)
