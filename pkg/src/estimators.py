"""
Dependent-data estimators of the intervention mean psi0.

Responsibilities:
- build baseline (sW) and exposure (sA) summary columns through the network
- apply an estimation-side intervention to the exposure columns
- G-computation: average the fitted outcome model over intervened summaries
- IPW: weight observed outcomes by g*/g0 from binned exposure densities
- IID plug-in variance and parametric-bootstrap variance with 95% CIs
"""

from __future__ import annotations

import dataclasses
import logging
import math
import re
import warnings
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from src import exprlang
from src.density import MAX_PER_BIN, BinnedDensityModel, equal_mass_cuts, fit_binned_density
from src.errors import EstimationError, ModelError, ParameterError, WeightCapWarning
from src.logistic import LogisticFit, fit_logistic, with_intercept
from src.rng import RngStreams
from src.semodel import NodeSpec, _as_expression
from src.simengine import Dataset, sample_node

logger = logging.getLogger(__name__)

WEIGHT_CAP = 50.0
Z_95 = 1.959963984540054

_TERM_RE = re.compile(r"^\s*([A-Za-z][A-Za-z0-9_.]*)\s*(?:=(?!=)\s*(.+?))?\s*$", re.S)


# --- summaries -------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class SummaryTerm:
    name: str
    expr: Optional[exprlang.Expression] = None  # None: the raw column `name`
    replace_na_w0: bool = False

    @classmethod
    def parse(cls, text: str, replace_na_w0: bool = False) -> "SummaryTerm":
        """'W1' (raw column) or 'meanW1 = ifelse(nF > 0, sum(W1[[1:Kmax]])/nF, 0)'."""
        match = _TERM_RE.match(text)
        if not match:
            raise ModelError(f"cannot read summary term {text!r}; expected NAME or NAME = formula")
        name, body = match.groups()
        expr = _as_expression(body, f"summary {name!r}") if body else None
        return cls(name, expr, replace_na_w0)

    @property
    def is_raw(self) -> bool:
        return self.expr is None

    def dependencies(self) -> frozenset:
        if self.expr is None:
            return frozenset({self.name})
        return exprlang.dependencies(self.expr)

    def to_text(self) -> str:
        return self.name if self.expr is None else f"{self.name} = {exprlang.to_text(self.expr)}"


def _terms(items) -> Tuple[SummaryTerm, ...]:
    out = []
    for item in items or ():
        if isinstance(item, SummaryTerm):
            out.append(item)
        elif isinstance(item, str):
            out.append(SummaryTerm.parse(item))
        else:
            out.append(SummaryTerm.parse(item["term"], bool(item.get("replace_na_w0", False))))
    return tuple(out)


@dataclasses.dataclass(frozen=True)
class SummarySpec:
    sW: Tuple[SummaryTerm, ...] = ()
    sA: Tuple[SummaryTerm, ...] = ()

    @classmethod
    def build(cls, sW=(), sA=()) -> "SummarySpec":
        spec = cls(_terms(sW), _terms(sA))
        spec.check()
        return spec

    @property
    def terms(self) -> Tuple[SummaryTerm, ...]:
        return self.sW + self.sA

    def names(self) -> List[str]:
        return [t.name for t in self.terms]

    def exposure_columns(self) -> frozenset:
        """Raw columns the exposure summaries are built from, less anything sW already uses."""
        baseline = set()
        for t in self.sW:
            baseline |= t.dependencies() | {t.name}
        exposure = {t.name for t in self.sA if t.is_raw}
        for t in self.sA:
            if not t.is_raw:
                exposure |= t.dependencies() - baseline
        return frozenset(exposure)

    def check(self, exposures: Sequence[str] = ()) -> None:
        seen = set()
        for t in self.terms:
            if t.name in seen:
                raise ModelError(f"summary {t.name!r} defined twice")
            seen.add(t.name)
        blocked = set(exposures) | {t.name for t in self.sA}
        for t in self.sW:
            bad = t.dependencies() & blocked
            if bad:
                raise ModelError(f"baseline summary {t.name!r} references exposure column(s) {sorted(bad)}")


def build_summaries(dataset: Dataset, spec: SummarySpec, network=None) -> Dataset:
    """
    One new column per formula summary, evaluated in order (sW then sA) so a
    later summary may use an earlier one. Raw terms must name existing columns.
    """
    network = network if network is not None else dataset.network
    columns: Dict[str, np.ndarray] = dict(dataset.columns)
    added: Dict[str, np.ndarray] = {}
    for term in spec.terms:
        if term.is_raw:
            if term.name not in columns:
                raise ModelError(f"summary {term.name!r} names no column; columns: {sorted(columns)}")
            continue
        if term.name in columns:
            raise ModelError(f"summary {term.name!r} collides with an existing column")
        ctx = exprlang.EvalContext(
            n=dataset.n,
            columns=columns,
            network=network,
            replace_na_w0=term.replace_na_w0,
            node=term.name,
        )
        value = np.asarray(exprlang.evaluate(term.expr, ctx), dtype=float)
        if value.ndim == 0:
            value = np.full(dataset.n, float(value))
        if value.ndim == 2:
            for j in range(value.shape[1]):
                name = f"{term.name}.{j + 1}"
                if name in columns:
                    raise ModelError(f"summary {name!r} collides with an existing column")
                columns[name] = added[name] = value[:, j]
            continue
        columns[term.name] = added[term.name] = value
    if not added:
        return dataset
    return dataset.with_columns(added)


# --- intervention and formulas ---------------------------------------------


@dataclasses.dataclass(frozen=True)
class InterventionSpec:
    """Replacement node specs for exposure columns, evaluated on observed data."""

    nodes: Tuple[NodeSpec, ...]
    params: Mapping[str, float] = dataclasses.field(default_factory=dict)

    @classmethod
    def build(cls, params: Mapping[str, float] | None = None, **rules) -> "InterventionSpec":
        """InterventionSpec.build({"shift": 0.5}, A="A + shift") -- each rule is an rconst formula."""
        nodes = tuple(NodeSpec.build(name, "rconst", const=rule) for name, rule in rules.items())
        return cls(nodes, dict(params or {}))

    @property
    def targets(self) -> Tuple[str, ...]:
        return tuple(n for spec in self.nodes for n in spec.names)

    @property
    def stochastic(self) -> bool:
        return any(spec.distr != "rconst" for spec in self.nodes)

    def with_params(self, **overrides: float) -> "InterventionSpec":
        unknown = set(overrides) - set(self.params)
        if unknown:
            raise ModelError(f"intervention has no parameter(s) {sorted(unknown)}")
        return dataclasses.replace(self, params={**self.params, **overrides})

    def apply(self, dataset: Dataset, seed: int = 0, replicate: int = 0, draw: int = 0) -> Dataset:
        """The dataset with every target column replaced by its intervened values."""
        streams = RngStreams(seed, f"intervention.{replicate}")
        columns = dict(dataset.columns)
        for spec in self.nodes:
            for name in spec.names:
                if name not in columns:
                    raise ModelError(f"intervention replaces unknown column {name!r}")
            drawn = sample_node(spec, dataset.n, columns, dataset.network, self.params, streams, draw)
            columns.update(drawn)
        return dataset.with_columns({k: columns[k] for k in self.targets})


@dataclasses.dataclass(frozen=True)
class RegressionSpec:
    left: Tuple[str, ...]
    right: Tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> "RegressionSpec":
        """'Y ~ A + sumA + meanW1' or 'A + sumA ~ meanW1'; names only, '+'-separated."""
        if text.count("~") != 1:
            raise ModelError(f"regression formula {text!r} needs exactly one '~'")
        lhs, rhs = text.split("~")

        def names(side: str, where: str) -> Tuple[str, ...]:
            parts = tuple(p.strip() for p in side.split("+"))
            for p in parts:
                if not re.fullmatch(r"[A-Za-z][A-Za-z0-9_.]*", p):
                    raise ModelError(f"regression formula {text!r}: {where} term {p!r} is not a column name")
            return parts

        left = names(lhs, "left")
        right = () if rhs.strip() in ("", "1") else names(rhs, "right")
        return cls(left, right)

    @property
    def outcome(self) -> str:
        if len(self.left) != 1:
            raise ModelError(f"outcome regression needs one left-hand name, got {list(self.left)}")
        return self.left[0]

    def to_text(self) -> str:
        return f"{' + '.join(self.left)} ~ {' + '.join(self.right) or '1'}"


# --- reports ---------------------------------------------------------------


def confidence_interval(estimate: float, variance: Optional[float]) -> Tuple[float, float]:
    if variance is None or np.isnan(variance):
        return (np.nan, np.nan)
    half = Z_95 * math.sqrt(max(variance, 0.0))
    return (estimate - half, estimate + half)


@dataclasses.dataclass
class EstimateReport:
    estimator: str
    estimate: float
    var_iid: float
    n: int
    var_boot: Optional[float] = None
    diagnostics: Dict[str, object] = dataclasses.field(default_factory=dict)

    @property
    def ci_iid(self) -> Tuple[float, float]:
        return confidence_interval(self.estimate, self.var_iid)

    @property
    def ci_boot(self) -> Tuple[float, float]:
        return confidence_interval(self.estimate, self.var_boot)

    def covers(self, psi0: float, method: str = "iid") -> Optional[bool]:
        lo, hi = self.ci_iid if method == "iid" else self.ci_boot
        if np.isnan(lo):
            return None
        return bool(lo <= psi0 <= hi)

    HEADER = ["estimator", "estimate", "var_iid", "ci_iid_lo", "ci_iid_hi", "var_boot", "ci_boot_lo", "ci_boot_hi", "n"]

    def row(self) -> List[object]:
        return [self.estimator, self.estimate, self.var_iid, *self.ci_iid, self.var_boot, *self.ci_boot, self.n]


def iid_variance(contributions, estimate: float) -> float:
    """(1/n^2) sum_i (c_i - psi)^2, treating units as independent."""
    c = np.asarray(contributions, dtype=float)
    return float(np.sum((c - estimate) ** 2) / c.size ** 2)


# --- outcome model ---------------------------------------------------------


def _outcome_design(data: Dataset, qform: RegressionSpec) -> np.ndarray:
    missing = [c for c in qform.right if c not in data]
    if missing:
        raise EstimationError(f"outcome regression covariates {missing} were not built")
    return with_intercept([data[c] for c in qform.right], data.n)


@dataclasses.dataclass
class OutcomeModel:
    qform: RegressionSpec
    fit: LogisticFit

    def predict(self, data: Dataset) -> np.ndarray:
        return self.fit.predict(_outcome_design(data, self.qform))


def fit_outcome(data: Dataset, qform: RegressionSpec) -> OutcomeModel:
    fit = fit_logistic(_outcome_design(data, qform), data[qform.outcome])
    if not fit.converged and not fit.separated:
        logger.warning("outcome regression %s did not converge", qform.to_text())
    return OutcomeModel(qform, fit)


def _check_targets(summaries: SummarySpec, intervention: InterventionSpec) -> None:
    summaries.check(exposures=intervention.targets)


# --- estimators ------------------------------------------------------------


def _projected_ratio(design: np.ndarray, fitted: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Residual weights x_i' I^-1 dpsi/dbeta of the logistic plug-in (I: mean information)."""
    info = design.T @ (design * (fitted * (1.0 - fitted))[:, None]) / design.shape[0]
    direction = np.linalg.lstsq(info, gradient, rcond=None)[0]
    return design @ direction


def gcomp(
    dataset: Dataset,
    summaries: SummarySpec,
    intervention: InterventionSpec,
    qform: RegressionSpec,
    mc_draws: int = 1,
    seed: int = 0,
    replicate: int = 0,
    outcome_model: OutcomeModel | None = None,
    weights: "IpwWeights | np.ndarray | None" = None,
) -> EstimateReport:
    """
    Fit Q(sA, sW) on observed summaries, rebuild sA under the intervened
    exposures, and average the predicted success probabilities.

    The IID variance is (1/n^2) sum_i (D_i - mean D)^2 over the influence curve
        D_i = Qbar*_i + h_i (Y_i - Qbar_i),
    with Qbar* the prediction under the intervention and Qbar the fitted value
    at the observed summaries. By default h_i is the g*/g0 ratio projected on
    the outcome design, which makes D exact for the logistic plug-in; passing
    `weights` (an IpwWeights or one value per unit) uses them as h instead.
    """
    if mc_draws < 1:
        raise ParameterError(f"mc_draws must be at least 1, got {mc_draws}")
    _check_targets(summaries, intervention)
    observed = build_summaries(dataset, summaries)
    model = outcome_model or fit_outcome(observed, qform)
    draws = mc_draws if intervention.stochastic else 1
    design = _outcome_design(observed, model.qform)
    plugin = np.zeros(dataset.n)
    gradient = np.zeros(design.shape[1])
    for d in range(draws):
        intervened = build_summaries(intervention.apply(dataset, seed, replicate, d), summaries)
        star = _outcome_design(intervened, model.qform)
        q_star = model.fit.predict(star)
        plugin += q_star
        gradient += star.T @ (q_star * (1.0 - q_star))
    plugin /= draws
    gradient /= draws * dataset.n
    estimate = float(plugin.mean())

    fitted = model.fit.predict(design)
    if weights is None:
        h = _projected_ratio(design, fitted, gradient)
    else:
        h = np.asarray(weights.weights if isinstance(weights, IpwWeights) else weights, dtype=float)
        if h.shape != (dataset.n,):
            raise EstimationError(f"expected {dataset.n} residual weights, got shape {h.shape}")
    curve = plugin + h * (np.asarray(observed[model.qform.outcome], dtype=float) - fitted)
    diagnostics = {
        "irls_iterations": model.fit.iterations,
        "converged": model.fit.converged,
        "separated": model.fit.separated,
        "mc_draws": draws,
        "residual_weights": "projected" if weights is None else "density_ratio",
    }
    return EstimateReport("gcomp", estimate, iid_variance(curve, float(curve.mean())), dataset.n, diagnostics=diagnostics)


def observed_cuts(observed, intervened: Sequence[np.ndarray], n_bins: int) -> np.ndarray:
    """Equal-mass cuts of the observed values, outer edges widened to the intervened extremes."""
    cuts = equal_mass_cuts(observed, n_bins=n_bins)
    values = [np.asarray(v, dtype=float) for v in intervened]
    values = [v[~np.isnan(v)] for v in values]
    values = [v for v in values if v.size]
    if values:
        cuts[0] = min(cuts[0], min(float(v.min()) for v in values))
        cuts[-1] = max(cuts[-1], max(float(v.max()) for v in values))
    return cuts


@dataclasses.dataclass
class IpwWeights:
    weights: np.ndarray
    capped: int
    g0: BinnedDensityModel
    gstar: BinnedDensityModel


def ipw_weights(
    dataset: Dataset,
    summaries: SummarySpec,
    intervention: InterventionSpec,
    hform: RegressionSpec,
    max_per_bin: int = MAX_PER_BIN,
    weight_cap: float = WEIGHT_CAP,
    mc_draws: int = 1,
    seed: int = 0,
    replicate: int = 0,
) -> IpwWeights:
    """
    w_i = g*(sA_i | sW_i) / g0(sA_i | sW_i). Both densities share cut points
    placed at equal-mass quantiles of the observed exposure summaries; only
    the two outer edges are stretched to cover intervened values beyond the
    observed range. Every weight is evaluated at an observed unit, where the
    bin widths of g* and g0 cancel. g* is fit to the intervened summaries
    (pooled over draws for stochastic rules).
    """
    _check_targets(summaries, intervention)
    if dataset.n < 2 * max_per_bin:
        raise EstimationError(f"need n >= 2*max_per_bin = {2 * max_per_bin} units to bin, got {dataset.n}")
    observed = build_summaries(dataset, summaries)
    draws = mc_draws if intervention.stochastic else 1
    intervened = [build_summaries(intervention.apply(dataset, seed, replicate, d), summaries) for d in range(draws)]
    n_bins = math.ceil(dataset.n / max_per_bin)
    cuts = {name: observed_cuts(observed[name], [d[name] for d in intervened], n_bins) for name in hform.left}
    g0 = fit_binned_density(observed, hform.left, hform.right, max_per_bin, cuts)
    star_data = intervened[0] if draws == 1 else _stack(intervened, list(hform.left) + list(hform.right))
    gstar = fit_binned_density(star_data, hform.left, hform.right, max_per_bin, cuts)

    numerator = gstar.density(observed)
    denominator = g0.density(observed)
    zero = denominator <= 0
    ratio = numerator / np.where(zero, 1.0, denominator)
    over = zero | (ratio > weight_cap)
    weights = np.where(over, weight_cap, ratio)
    capped = int(over.sum())
    if capped:
        msg = f"{capped} IPW weight(s) capped at {weight_cap:g}"
        warnings.warn(msg, WeightCapWarning, stacklevel=2)
        logger.warning(msg)
    return IpwWeights(weights, capped, g0, gstar)


def _stack(datasets: Sequence[Dataset], names: Sequence[str]) -> Dict[str, np.ndarray]:
    return {c: np.concatenate([d[c] for d in datasets]) for c in names}


def ipw_from_weights(weights: IpwWeights, y) -> EstimateReport:
    y = np.asarray(y, dtype=float)
    if np.isnan(y).any():
        raise EstimationError("outcome contains missing values")
    contributions = weights.weights * y
    estimate = float(contributions.mean())
    w = weights.weights
    diagnostics = {
        "weight_min": float(w.min()),
        "weight_mean": float(w.mean()),
        "weight_max": float(w.max()),
        "weights_capped": weights.capped,
        "bins": {c.name: c.n_bins for c in weights.g0.components},
        "irls_iterations": weights.g0.iterations(),
    }
    return EstimateReport("ipw", estimate, iid_variance(contributions, estimate), y.size, diagnostics=diagnostics)


def ipw(
    dataset: Dataset,
    summaries: SummarySpec,
    intervention: InterventionSpec,
    hform: RegressionSpec,
    outcome: str,
    max_per_bin: int = MAX_PER_BIN,
    weight_cap: float = WEIGHT_CAP,
    mc_draws: int = 1,
    seed: int = 0,
    replicate: int = 0,
) -> EstimateReport:
    """(1/n) sum_i w_i Y_i with density-ratio weights from `ipw_weights`."""
    weights = ipw_weights(dataset, summaries, intervention, hform, max_per_bin, weight_cap, mc_draws, seed, replicate)
    return ipw_from_weights(weights, dataset[outcome])


# --- bootstrap -------------------------------------------------------------


def _bootstrap_one(closure, dataset: Dataset, outcome: str, qhat: np.ndarray, streams: RngStreams, b: int) -> float:
    y = (streams.uniforms(dataset.n, "bootstrap", b) < qhat).astype(float)
    return float(closure(dataset.with_columns({outcome: y}, {outcome: "binary"})))


def parametric_bootstrap(
    dataset: Dataset,
    outcome: str,
    qhat,
    closure: Callable[[Dataset], float],
    n_boot: int,
    seed: int = 0,
    replicate: int = 0,
    threads: int = 1,
) -> Tuple[float, np.ndarray]:
    """
    Redraw Y_b ~ Bernoulli(qhat) with W, A and the network held fixed, rerun
    `closure` on each bootstrap dataset, and return the sample variance of
    the B estimates with the estimates themselves.
    """
    if n_boot < 2:
        raise ParameterError(f"bootstrap needs at least 2 samples, got {n_boot}")
    qhat = np.asarray(qhat, dtype=float)
    streams = RngStreams(seed, f"bootstrap.{replicate}")
    if threads > 1:
        values = Parallel(n_jobs=threads)(
            delayed(_bootstrap_one)(closure, dataset, outcome, qhat, streams, b) for b in range(n_boot)
        )
    else:
        values = [_bootstrap_one(closure, dataset, outcome, qhat, streams, b) for b in range(n_boot)]
    estimates = np.asarray(values)
    return float(np.var(estimates, ddof=1)), estimates


# --- combined configuration ------------------------------------------------


@dataclasses.dataclass
class EstimationConfig:
    summaries: SummarySpec
    intervention: InterventionSpec
    qform: RegressionSpec
    hform: Optional[RegressionSpec] = None
    estimators: Tuple[str, ...] = ("gcomp", "ipw")
    max_per_bin: int = MAX_PER_BIN
    weight_cap: float = WEIGHT_CAP
    mc_draws: int = 1
    n_boot: int = 0

    def __post_init__(self):
        unknown = set(self.estimators) - {"gcomp", "ipw"}
        if unknown:
            raise ModelError(f"unknown estimator(s) {sorted(unknown)}; expected gcomp, ipw")
        if "ipw" in self.estimators and self.hform is None:
            raise ModelError("the ipw estimator needs an hform")
        if self.n_boot == 1 or self.n_boot < 0:
            raise ParameterError(f"n_boot must be 0 (off) or at least 2, got {self.n_boot}")
        self.summaries.check(exposures=self.intervention.targets)

    @property
    def outcome(self) -> str:
        return self.qform.outcome

    def with_params(self, **overrides: float) -> "EstimationConfig":
        known = {k: v for k, v in overrides.items() if k in self.intervention.params}
        return dataclasses.replace(self, intervention=self.intervention.with_params(**known)) if known else self


def estimate_all(
    dataset: Dataset,
    config: EstimationConfig,
    seed: int = 0,
    replicate: int = 0,
    threads: int = 1,
) -> List[EstimateReport]:
    """Run every configured estimator on one dataset, with bootstrap variances if n_boot > 0."""
    observed = build_summaries(dataset, config.summaries)
    qmodel = fit_outcome(observed, config.qform)
    qhat = qmodel.predict(observed)
    reports: List[EstimateReport] = []
    for name in config.estimators:
        if name == "gcomp":

            def closure(data: Dataset) -> float:
                return gcomp(data, config.summaries, config.intervention, config.qform, config.mc_draws, seed, replicate).estimate

            report = gcomp(
                dataset, config.summaries, config.intervention, config.qform, config.mc_draws, seed, replicate, qmodel
            )
        else:
            weights = ipw_weights(
                dataset,
                config.summaries,
                config.intervention,
                config.hform,
                config.max_per_bin,
                config.weight_cap,
                config.mc_draws,
                seed,
                replicate,
            )

            def closure(data: Dataset, weights: IpwWeights = weights) -> float:
                return ipw_from_weights(weights, data[config.outcome]).estimate

            report = ipw_from_weights(weights, dataset[config.outcome])
        if config.n_boot:
            var_boot, _ = parametric_bootstrap(
                dataset, config.outcome, qhat, closure, config.n_boot, seed, replicate, threads
            )
            report.var_boot = var_boot
        reports.append(report)
        logger.debug("replicate %d %s: %.6f", replicate, name, report.estimate)
    return reports
