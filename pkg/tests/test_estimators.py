import numpy as np
import pytest

from src.density import equal_mass_cuts
from src.errors import EstimationError, ModelError, ParameterError, WeightCapWarning
from src.estimators import (
    Z_95,
    EstimateReport,
    EstimationConfig,
    InterventionSpec,
    RegressionSpec,
    SummarySpec,
    SummaryTerm,
    build_summaries,
    estimate_all,
    fit_outcome,
    gcomp,
    iid_variance,
    ipw,
    ipw_weights,
    observed_cuts,
    parametric_bootstrap,
)
from src.simengine import Dataset, simulate_observed

SW = ["W", {"term": "sumW = sum(W[[1:Kmax]])", "replace_na_w0": True}]
SA = ["A", {"term": "sumA = sum(A[[1:Kmax]])", "replace_na_w0": True}]
QFORM = RegressionSpec.parse("Y ~ A + sumA + W + sumW")
HFORM = RegressionSpec.parse("A + sumA ~ W + sumW")


@pytest.fixture(scope="module")
def observed(shift_model):
    return simulate_observed(shift_model, 300, seed=11)


@pytest.fixture(scope="module")
def summaries():
    return SummarySpec.build(sW=SW, sA=SA)


def _trait_data(net):
    return Dataset(3, {"W1": np.array([5.0, 7.0, 9.0])}, {"W1": "continuous"}, network=net)


# --- summaries -------------------------------------------------------------


def test_summary_term_parsing():
    raw = SummaryTerm.parse("W1")
    assert raw.is_raw and raw.dependencies() == {"W1"}
    term = SummaryTerm.parse("meanW1 = ifelse(nF > 0, sum(W1[[1:Kmax]])/nF, 0)", replace_na_w0=True)
    assert term.name == "meanW1" and not term.is_raw and term.replace_na_w0
    assert "W1" in term.dependencies()
    assert SummaryTerm.parse(term.to_text()).expr == term.expr
    with pytest.raises(ModelError):
        SummaryTerm.parse("1abc = W1")
    with pytest.raises(ModelError):
        SummaryTerm.parse("x = W1 +")


def test_friend_mean_summary(line_net):
    spec = SummarySpec.build(
        sW=[{"term": "meanW1 = ifelse(nF > 0, sum(W1[[1:Kmax]])/nF, 0)", "replace_na_w0": True}]
    )
    out = build_summaries(_trait_data(line_net), spec)
    assert out["meanW1"].tolist() == [7.0, 7.0, 7.0]
    assert out["W1"].tolist() == [5.0, 7.0, 9.0]


def test_matrix_summary_expands_to_numbered_columns(line_net):
    out = build_summaries(_trait_data(line_net), SummarySpec.build(sW=["F = W1[[1:2]]"]))
    assert out["F.1"].tolist() == [7.0, 5.0, 7.0]
    assert np.array_equal(out["F.2"], [np.nan, 9.0, np.nan], equal_nan=True)


def test_later_summaries_see_earlier_ones(line_net):
    spec = SummarySpec.build(sW=["W1", "twice = 2*W1", "plus = twice + 1"])
    out = build_summaries(_trait_data(line_net), spec)
    assert out["plus"].tolist() == [11.0, 15.0, 19.0]


def test_raw_only_summaries_return_the_dataset(line_net):
    data = _trait_data(line_net)
    assert build_summaries(data, SummarySpec.build(sW=["W1"])) is data


def test_summary_errors(line_net):
    data = _trait_data(line_net)
    with pytest.raises(ModelError, match="names no column"):
        build_summaries(data, SummarySpec.build(sW=["W9"]))
    with pytest.raises(ModelError, match="collides"):
        build_summaries(data, SummarySpec.build(sW=["W1 = W1 + 1"]))
    with pytest.raises(ModelError, match="defined twice"):
        SummarySpec.build(sW=["W1"], sA=["W1"])
    with pytest.raises(ModelError, match="references exposure"):
        SummarySpec.build(sW=["sumA = sum(A[[1:Kmax]])"], sA=["A"])
    with pytest.raises(ModelError, match="references exposure"):
        SummarySpec.build(sW=["twiceA = 2*A"]).check(exposures=["A"])


def test_exposure_columns(summaries):
    assert summaries.exposure_columns() == {"A"}
    assert summaries.names() == ["W", "sumW", "A", "sumA"]


# --- formulas and interventions --------------------------------------------


def test_regression_formulas():
    assert QFORM.outcome == "Y"
    assert QFORM.right == ("A", "sumA", "W", "sumW")
    assert HFORM.left == ("A", "sumA")
    with pytest.raises(ModelError, match="one left-hand name"):
        HFORM.outcome
    assert RegressionSpec.parse("Y ~ 1").right == ()
    assert RegressionSpec.parse("Y ~ 1").to_text() == "Y ~ 1"
    assert RegressionSpec.parse(QFORM.to_text()) == QFORM
    for bad in ["Y ~ A ~ B", "Y + A", "Y ~ A*B", "Y ~ log(A)"]:
        with pytest.raises(ModelError):
            RegressionSpec.parse(bad)


def test_intervention_replaces_targets_only(observed):
    shifted = InterventionSpec.build({"shift": 0.5}, A="A + shift").apply(observed)
    assert np.allclose(shifted["A"], observed["A"] + 0.5)
    assert np.array_equal(shifted["W"], observed["W"])
    assert shifted.network == observed.network


def test_intervention_parameters(observed):
    spec = InterventionSpec.build({"shift": 0.5}, A="A + shift")
    assert spec.targets == ("A",) and not spec.stochastic
    moved = spec.with_params(shift=1.0).apply(observed)
    assert np.allclose(moved["A"], observed["A"] + 1.0)
    with pytest.raises(ModelError, match="no parameter"):
        spec.with_params(scale=2.0)
    with pytest.raises(ModelError, match="unknown column"):
        InterventionSpec.build(Z="0").apply(observed)


def test_truncated_shift_intervention(line_net):
    data = Dataset(
        3, {"A": np.array([0.0, 0.2, 2.0]), "W": np.zeros(3)}, {"A": "continuous", "W": "binary"}, network=line_net
    )
    rule = "ifelse(A - W > (log(trunc)/shift + shift/2), A, A + shift)"
    spec = InterventionSpec.build({"trunc": 1.0, "shift": 0.5}, A=rule)
    assert np.allclose(spec.apply(data)["A"], [0.5, 0.7, 2.0])


# --- estimators ------------------------------------------------------------


def test_null_intervention_gcomp_reproduces_outcome_mean(observed, summaries):
    report = gcomp(observed, summaries, InterventionSpec.build(A="A"), QFORM)
    assert report.estimate == pytest.approx(observed["Y"].mean(), abs=1e-8)
    assert report.n == 300 and report.var_iid > 0
    assert report.diagnostics["converged"]


def test_null_intervention_weights_are_one(observed, summaries):
    weights = ipw_weights(observed, summaries, InterventionSpec.build(A="A"), HFORM)
    assert weights.capped == 0
    assert np.allclose(weights.weights, 1.0)
    report = ipw(observed, summaries, InterventionSpec.build(A="A"), HFORM, "Y")
    assert report.estimate == pytest.approx(observed["Y"].mean())


def test_shift_raises_the_gcomp_estimate(observed, summaries):
    report = gcomp(observed, summaries, InterventionSpec.build({"shift": 0.5}, A="A + shift"), QFORM)
    assert report.estimate > observed["Y"].mean()
    assert 0.0 < report.estimate < 1.0


def test_cuts_come_from_observed_values_only():
    observed = np.arange(100, dtype=float)
    cuts = observed_cuts(observed, [observed + 30.0], n_bins=4)
    assert np.array_equal(cuts[1:-1], equal_mass_cuts(observed, n_bins=4)[1:-1])
    assert cuts[0] == 0.0 and cuts[-1] == 129.0
    inside = observed_cuts(observed, [observed / 2], n_bins=4)
    assert np.array_equal(inside, equal_mass_cuts(observed, n_bins=4))


def test_shift_weights_use_observed_quantiles(observed, summaries):
    spec = InterventionSpec.build({"shift": 0.5}, A="A + shift")
    weights = ipw_weights(observed, summaries, spec, HFORM)
    built = build_summaries(observed, summaries)
    for name in ("A", "sumA"):
        cuts = weights.g0.cuts[name]
        assert np.array_equal(cuts, weights.gstar.cuts[name])
        assert np.array_equal(cuts[1:-1], equal_mass_cuts(built[name], n_bins=6)[1:-1])
    assert weights.g0.cuts["A"][-1] == pytest.approx(built["A"].max() + 0.5)
    assert np.all(weights.weights > 0)


def test_weight_cap(observed, summaries):
    spec = InterventionSpec.build({"shift": 0.5}, A="A + shift")
    with pytest.warns(WeightCapWarning):
        weights = ipw_weights(observed, summaries, spec, HFORM, weight_cap=1.0)
    assert weights.capped > 0
    assert weights.weights.max() <= 1.0


def test_estimator_argument_errors(observed, summaries):
    with pytest.raises(ParameterError):
        gcomp(observed, summaries, InterventionSpec.build(A="A"), QFORM, mc_draws=0)
    with pytest.raises(EstimationError, match="2\\*max_per_bin"):
        ipw_weights(observed, summaries, InterventionSpec.build(A="A"), HFORM, max_per_bin=200)
    with pytest.raises(EstimationError, match="were not built"):
        gcomp(observed, summaries, InterventionSpec.build(A="A"), RegressionSpec.parse("Y ~ A + meanW"))


# --- variance --------------------------------------------------------------


def test_iid_variance():
    assert iid_variance([1.0, 2.0, 3.0], 2.0) == pytest.approx(2.0 / 9.0)


def test_null_intervention_gcomp_variance_is_the_outcome_variance(observed, summaries):
    report = gcomp(observed, summaries, InterventionSpec.build(A="A"), QFORM)
    ybar = observed["Y"].mean()
    assert report.var_iid == pytest.approx(ybar * (1 - ybar) / observed.n, rel=1e-6)
    assert report.diagnostics["residual_weights"] == "projected"


def test_gcomp_variance_carries_outcome_residuals(observed, summaries):
    spec = InterventionSpec.build({"shift": 0.5}, A="A + shift")
    report = gcomp(observed, summaries, spec, QFORM)
    built = build_summaries(observed, summaries)
    predictions = fit_outcome(built, QFORM).predict(build_summaries(spec.apply(observed), summaries))
    plugin_only = iid_variance(predictions, predictions.mean())
    assert report.var_iid > 2 * plugin_only
    ybar = observed["Y"].mean()
    assert report.var_iid == pytest.approx(ybar * (1 - ybar) / observed.n, rel=0.5)


def test_gcomp_accepts_density_ratio_residual_weights(observed, summaries):
    spec = InterventionSpec.build({"shift": 0.5}, A="A + shift")
    weights = ipw_weights(observed, summaries, spec, HFORM)
    ratio = gcomp(observed, summaries, spec, QFORM, weights=weights)
    projected = gcomp(observed, summaries, spec, QFORM)
    assert ratio.estimate == projected.estimate
    assert ratio.diagnostics["residual_weights"] == "density_ratio"
    assert ratio.var_iid == pytest.approx(projected.var_iid, rel=0.5)
    unit = gcomp(observed, summaries, spec, QFORM, weights=np.ones(observed.n))
    assert unit.var_iid > 0
    with pytest.raises(EstimationError, match="residual weights"):
        gcomp(observed, summaries, spec, QFORM, weights=np.ones(5))


def test_report_intervals_and_coverage():
    report = EstimateReport("gcomp", 0.5, 0.01, 100)
    lo, hi = report.ci_iid
    assert lo == pytest.approx(0.5 - Z_95 * 0.1) and hi == pytest.approx(0.5 + Z_95 * 0.1)
    assert report.covers(0.6) is True
    assert report.covers(0.8) is False
    assert report.covers(0.5, "boot") is None
    assert np.isnan(report.ci_boot[0])
    assert len(report.row()) == len(EstimateReport.HEADER)


def _outcome_mean(data):
    return float(np.mean(data["Y"]))


def test_parametric_bootstrap_variance(observed):
    qhat = np.full(observed.n, 0.5)
    var, estimates = parametric_bootstrap(observed, "Y", qhat, _outcome_mean, 200, seed=3)
    assert estimates.shape == (200,)
    assert var == pytest.approx(0.25 / observed.n, rel=0.35)
    again, _ = parametric_bootstrap(observed, "Y", qhat, _outcome_mean, 200, seed=3)
    assert again == var
    other, _ = parametric_bootstrap(observed, "Y", qhat, _outcome_mean, 200, seed=3, replicate=1)
    assert other != var


def test_parallel_bootstrap_matches_serial(observed):
    qhat = np.linspace(0.1, 0.9, observed.n)
    serial = parametric_bootstrap(observed, "Y", qhat, _outcome_mean, 8, seed=4)[1]
    threaded = parametric_bootstrap(observed, "Y", qhat, _outcome_mean, 8, seed=4, threads=2)[1]
    assert np.array_equal(serial, threaded)


def test_bootstrap_variance_is_stable_in_the_sample_count(observed, summaries):
    qhat = fit_outcome(build_summaries(observed, summaries), QFORM).predict(build_summaries(observed, summaries))
    small, _ = parametric_bootstrap(observed, "Y", qhat, _outcome_mean, 100, seed=6)
    large, _ = parametric_bootstrap(observed, "Y", qhat, _outcome_mean, 400, seed=6)
    assert abs(small - large) <= 0.35 * large
    assert large == pytest.approx(np.sum(qhat * (1 - qhat)) / observed.n ** 2, rel=0.25)


def test_bootstrap_needs_two_samples(observed):
    with pytest.raises(ParameterError):
        parametric_bootstrap(observed, "Y", np.full(observed.n, 0.5), _outcome_mean, 1)


# --- configuration ---------------------------------------------------------


def _config(summaries, **kwargs):
    return EstimationConfig(
        summaries=summaries,
        intervention=InterventionSpec.build({"shift": 0.5}, A="A + shift"),
        qform=QFORM,
        hform=HFORM,
        **kwargs,
    )


def test_config_validation(summaries):
    with pytest.raises(ModelError, match="unknown estimator"):
        _config(summaries, estimators=("tmle",))
    with pytest.raises(ModelError, match="needs an hform"):
        EstimationConfig(summaries, InterventionSpec.build(A="A"), QFORM)
    with pytest.raises(ParameterError):
        _config(summaries, n_boot=1)
    gcomp_only = EstimationConfig(summaries, InterventionSpec.build(A="A"), QFORM, estimators=("gcomp",))
    assert gcomp_only.outcome == "Y"


def test_config_params_only_touch_the_intervention(summaries):
    config = _config(summaries)
    moved = config.with_params(shift=1.0, b_sumW=9.0)
    assert moved.intervention.params == {"shift": 1.0}
    assert config.with_params(b_sumW=9.0) is config


def test_estimate_all_with_bootstrap(observed, summaries):
    config = _config(summaries, n_boot=5)
    reports = estimate_all(observed, config, seed=2)
    assert [r.estimator for r in reports] == ["gcomp", "ipw"]
    for report in reports:
        assert report.var_boot is not None and report.var_boot >= 0
        assert np.isfinite(report.estimate)
    direct = gcomp(observed, config.summaries, config.intervention, config.qform)
    assert reports[0].estimate == pytest.approx(direct.estimate)
