import dataclasses

import numpy as np
import pytest

from src import experiment
from src.csvio import read_rows
from src.errors import ParameterError
from src.estimators import EstimateReport, EstimationConfig, InterventionSpec, RegressionSpec, SummarySpec
from src.experiment import (
    METRIC_COLUMNS,
    ORACLE,
    ReplicateResult,
    interpolate,
    run_experiment,
    run_replicate,
    scenario_sweep,
    summarize,
    write_failures,
    write_metrics,
    write_sweep,
)

SUMMARIES = SummarySpec.build(
    sW=["W", {"term": "sumW = sum(W[[1:Kmax]])", "replace_na_w0": True}],
    sA=["A", {"term": "sumA = sum(A[[1:Kmax]])", "replace_na_w0": True}],
)


def _config(**kwargs):
    return EstimationConfig(
        summaries=SUMMARIES,
        intervention=InterventionSpec.build({"shift": 0.5}, A="A + shift"),
        qform=RegressionSpec.parse("Y ~ A + sumA + W + sumW"),
        hform=RegressionSpec.parse("A + sumA ~ W + sumW"),
        **kwargs,
    )


def test_interpolate_includes_both_ends():
    points = interpolate({"a": 0.0, "b": 1.0}, {"a": 1.0, "b": 3.0}, 3)
    assert points == [{"a": 0.0, "b": 1.0}, {"a": 0.5, "b": 2.0}, {"a": 1.0, "b": 3.0}]
    assert interpolate({"a": 2.0}, {"a": 5.0}, 1) == [{"a": 2.0}]


def test_interpolate_errors():
    with pytest.raises(ParameterError):
        interpolate({"a": 0.0}, {"a": 1.0}, 0)
    with pytest.raises(ParameterError, match="different constants"):
        interpolate({"a": 0.0}, {"b": 1.0}, 3)


def _replicate(r, estimate, var_iid=0.01):
    rep = ReplicateResult(r)
    rep.reports["gcomp"] = EstimateReport("gcomp", estimate, var_iid, 100)
    return rep


def test_summarize_against_known_truth():
    reps = [_replicate(0, 1.0), _replicate(1, 2.0), _replicate(2, 3.0), ReplicateResult(3, error="EstimationError: x")]
    m = summarize("base", "gcomp", 2.0, reps, 100, 7)
    assert m.mean_est == pytest.approx(2.0)
    assert m.bias == pytest.approx(0.0)
    assert m.mse == pytest.approx(2.0 / 3.0)
    assert m.variance == pytest.approx(1.0)
    assert m.cover_iid == pytest.approx(1.0 / 3.0)
    assert np.isnan(m.cover_boot)
    assert m.mean_var_iid == pytest.approx(0.01)
    assert (m.reps, m.failed) == (3, 1)
    row = m.row()
    assert len(row) == len(METRIC_COLUMNS)
    assert row[METRIC_COLUMNS.index("mse_x10")] == pytest.approx(20.0 / 3.0)


def test_summarize_with_no_estimates():
    m = summarize("base", "ipw", 0.5, [ReplicateResult(0, error="boom")], 100, 7)
    assert m.reps == 0 and m.failed == 1
    assert np.isnan(m.bias)


def test_replicate_includes_oracle(shift_model):
    result = run_replicate(shift_model, "shift", _config(), 200, 5, 0)
    assert not result.failed
    assert set(result.reports) == {"gcomp", "ipw", ORACLE}
    assert 0.0 <= result.reports[ORACLE].estimate <= 1.0
    assert np.isnan(result.reports[ORACLE].var_iid)


def test_failed_replicates_are_recorded(shift_model):
    result = run_experiment(
        shift_model, "shift", _config(max_per_bin=200), 200, reps=2, seed=5, truth_reps=0, psi0=0.5
    )
    assert len(result.failures) == 2
    assert "EstimationError" in result.failures[0].error
    gcomp = result.metric("gcomp")
    assert (gcomp.reps, gcomp.failed) == (0, 2)


@pytest.fixture(scope="module")
def small_run(shift_model):
    return run_experiment(shift_model, "shift", _config(), 200, reps=4, seed=5, truth_reps=20, block_size=2)


def test_experiment_metrics(small_run):
    assert [m.estimator for m in small_run.metrics] == ["gcomp", "ipw", ORACLE]
    assert 0.0 < small_run.psi0 < 1.0
    assert small_run.psi0_se > 0
    for m in small_run.metrics:
        assert m.reps == 4 and m.failed == 0
        assert m.psi0 == small_run.psi0
    assert np.isnan(small_run.metric(ORACLE).cover_iid)
    with pytest.raises(KeyError):
        small_run.metric("tmle")


def test_experiment_threads_do_not_change_results(shift_model, small_run):
    threaded = run_experiment(
        shift_model, "shift", _config(), 200, reps=4, seed=5, truth_reps=20, threads=2, block_size=2
    )
    assert threaded.psi0 == small_run.psi0
    for a, b in zip(threaded.metrics, small_run.metrics):
        assert a.estimator == b.estimator
        np.testing.assert_array_equal(np.array(a.row()[2:], dtype=float), np.array(b.row()[2:], dtype=float))


def test_experiment_needs_replicates(shift_model):
    with pytest.raises(ParameterError):
        run_experiment(shift_model, "shift", _config(), 200, reps=0, seed=5, truth_reps=10)


def test_write_metrics(tmp_path, small_run):
    path = write_metrics(tmp_path / "metrics.csv", [small_run], comments=["scenario shift_model"])
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "# scenario shift_model"
    rows = list(read_rows(path))
    assert rows[0] == METRIC_COLUMNS
    assert [r[1] for r in rows[1:]] == ["gcomp", "ipw", ORACLE]
    assert rows[3][METRIC_COLUMNS.index("cover_iid")] == ""


def test_write_failures(tmp_path, shift_model):
    failed = run_experiment(shift_model, "shift", _config(max_per_bin=200), 200, reps=1, seed=5, truth_reps=0, psi0=0.5)
    rows = list(read_rows(write_failures(tmp_path / "f.csv", [failed])))
    assert rows[0] == ["scenario", "replicate", "error"]
    assert rows[1][:2] == ["base", "1"]


def test_sweep_rows(tmp_path, shift_model):
    sweep = scenario_sweep(
        shift_model, {"b_sumW": 0.0}, {"b_sumW": 0.6}, 2, "shift", _config(), 200, reps=2, seed=5, truth_reps=10
    )
    header, rows = sweep.rows()
    assert header[:3] == ["scenario", "b_sumW", "psi0"]
    assert "ipw_cover_iid" in header and "oracle_mean_est" in header
    assert header[-4:] == ["reps", "n", "seed", "failed"]
    assert [r[0] for r in rows] == ["Scenario 1", "Scenario 2"]
    assert [r[1] for r in rows] == [0.0, 0.6]
    assert all(len(r) == len(header) for r in rows)
    written = list(read_rows(write_sweep(tmp_path / "sweep.csv", sweep)))
    assert written[0] == header and len(written) == 3


def test_unexpected_replicate_error_is_recorded(shift_model, monkeypatch, caplog):
    real = experiment.estimate_all

    def flaky(data, config, seed, replicate, *args, **kwargs):
        if replicate == 1:
            raise np.linalg.LinAlgError("Singular matrix")
        return real(data, config, seed, replicate, *args, **kwargs)

    monkeypatch.setattr(experiment, "estimate_all", flaky)
    result = run_experiment(shift_model, "shift", _config(), 200, reps=3, seed=5, truth_reps=0, psi0=0.5)
    assert [r.replicate for r in result.failures] == [1]
    assert result.failures[0].error == "LinAlgError: Singular matrix"
    assert result.failures[0].reports == {}
    for name in ("gcomp", "ipw", ORACLE):
        m = result.metric(name)
        assert (m.reps, m.failed) == (2, 1)
    assert "replicate 1 failed unexpectedly" in caplog.text


@pytest.mark.slow
@pytest.mark.parametrize("seed", [54321, 777])
def test_smallworld_estimator_bands(scenario_dir, seed):
    from src.scenario import load_scenario

    scenario = load_scenario(scenario_dir / "smallworld_shift.yaml")
    config = dataclasses.replace(scenario.estimation, n_boot=0)
    result = run_experiment(
        scenario.model, "gstar", config, 500, reps=500, seed=seed, truth_reps=2000, params={"shift": 0.5}, threads=4
    )
    gcomp, ipw = result.metric("gcomp"), result.metric("ipw")
    assert abs(gcomp.bias) < 0.005
    assert abs(ipw.bias) < 0.01
    assert 0.006 <= gcomp.variance * 10 <= 0.026
    assert 0.008 <= ipw.variance * 10 <= 0.035


@pytest.mark.slow
def test_iid_coverage_is_nominal(scenario_dir):
    from src.scenario import load_scenario

    scenario = load_scenario(scenario_dir / "iid_baseline.yaml")
    result = run_experiment(scenario.model, "gstar", scenario.estimation, 500, reps=500, seed=54321, truth_reps=2000, threads=4)
    for name in ("gcomp", "ipw"):
        assert 0.92 <= result.metric(name).cover_iid <= 0.98, name


@pytest.mark.slow
def test_iid_coverage_falls_as_dependence_grows(scenario_dir):
    from src.scenario import load_scenario

    scenario = load_scenario(scenario_dir / "smallworld_shift.yaml")
    config = dataclasses.replace(scenario.estimation, n_boot=20)
    sweep = scenario_sweep(
        scenario.model,
        scenario.sweep.start,
        scenario.sweep.end,
        2,
        "gstar",
        config,
        500,
        reps=300,
        seed=54321,
        truth_reps=1000,
        params={"shift": 0.5},
        threads=4,
    )
    weak_run, strong_run = sweep.experiments
    assert sweep.coefficients == [scenario.sweep.start, scenario.sweep.end]
    for name in ("gcomp", "ipw"):
        weak, strong = weak_run.metric(name), strong_run.metric(name)
        assert strong.cover_iid <= weak.cover_iid - 0.05, name
        # Y-only redraws give the variance given W, A and the network
        assert strong.mean_var_boot <= strong.mean_var_iid, name
