import numpy as np
import pytest

from src.causaltarget import ate, mc_target_mean, replicate_means
from src.errors import ModelError, ParameterError
from src.scenario import load_scenario
from src.semodel import Action, DagModel, NodeSpec


def _static_model() -> DagModel:
    model = DagModel("static", outcome="Y")
    model.add_node(NodeSpec.build("W", "rbern", prob=0.4))
    model.add_node(NodeSpec.build("A", "rbern", prob="plogis(W)"))
    model.add_node(NodeSpec.build("Y", "rconst", const="A"))
    model.add_action(Action("one", (NodeSpec.build("A", "rconst", const=1),)))
    model.add_action(Action("zero", (NodeSpec.build("A", "rconst", const=0),)))
    return model.finalize()


def test_degenerate_outcome_is_exact():
    model = DagModel()
    model.add_node(NodeSpec.build("A", "rnorm", mean=0, sd=1))
    model.add_node(NodeSpec.build("Y", "rconst", const=1))
    model.add_action(Action("shift", (NodeSpec.build("A", "rconst", const=2),)))
    model.finalize()
    result = mc_target_mean(model, "shift", 40, 25, 1)
    assert result.value == 1.0
    assert result.mc_se == 0.0
    assert result.reps == 25 and result.n == 40


def test_static_ate_is_one():
    result = ate(_static_model(), "one", "zero", 30, 20, 3, keep_replicates=True)
    assert result.value == 1.0
    assert np.all(result.replicates == 1.0)


def test_same_action_ate_is_zero(shift_model):
    result = ate(shift_model, "shift", "shift", 60, 10, 4, keep_replicates=True)
    assert np.all(result.replicates == 0.0)


def test_replicate_prefix_is_reproducible(shift_model):
    short = mc_target_mean(shift_model, "shift", 60, 10, 8, keep_replicates=True)
    long = mc_target_mean(shift_model, "shift", 60, 60, 8, keep_replicates=True)
    assert np.array_equal(short.replicates, long.replicates[:10])
    assert long.mc_se == pytest.approx(np.std(long.replicates, ddof=1) / np.sqrt(60))


def test_parallel_matches_serial(shift_model):
    serial = replicate_means(shift_model, "shift", 40, 120, 5, "Y")
    parallel = replicate_means(shift_model, "shift", 40, 120, 5, "Y", threads=2)
    assert np.array_equal(serial, parallel)


def test_action_parameters_change_the_target(shift_model):
    low = mc_target_mean(shift_model, "shift", 60, 30, 2, params={"shift": 0.0})
    null = mc_target_mean(shift_model, "null", 60, 30, 2)
    assert low.value == null.value


def test_rejects_bad_inputs(shift_model):
    with pytest.raises(ParameterError):
        mc_target_mean(shift_model, "shift", 50, 0, 1)
    with pytest.raises(ModelError, match="unknown action"):
        mc_target_mean(shift_model, "nope", 50, 5, 1)
    with pytest.raises(ModelError, match="not a node"):
        mc_target_mean(shift_model, "shift", 50, 5, 1, outcome="Z")
    model = DagModel()
    model.add_node(NodeSpec.build("C", "rcat.b0", probs=[0.5, 0.5]))
    model.finalize()
    with pytest.raises(ModelError, match="categorical"):
        mc_target_mean(model, None, 20, 5, 1)


def test_summary_mentions_reps_and_n(shift_model):
    text = mc_target_mean(shift_model, "shift", 30, 5, 1).summary()
    assert "R=5" in text and "N=30" in text


@pytest.mark.slow
def test_smallworld_psi0(scenario_dir):
    scenario = load_scenario(scenario_dir / "smallworld_shift.yaml")
    result = mc_target_mean(scenario.model, "gstar", 500, 2000, 54321, params={"shift": 0.3}, threads=4)
    assert abs(result.value - 0.7438) < 0.01


@pytest.mark.slow
def test_null_action_matches_observed_law(scenario_dir):
    model = load_scenario(scenario_dir / "smallworld_shift.yaml").model
    null = mc_target_mean(model, "gnull", 500, 1000, 1)
    observed = mc_target_mean(model, None, 500, 1000, 2)
    assert abs(null.value - observed.value) < 3 * np.hypot(null.mc_se, observed.mc_se)


@pytest.mark.slow
def test_shift_raises_outcome(scenario_dir):
    model = load_scenario(scenario_dir / "smallworld_shift.yaml").model
    result = ate(model, "gstar", "gnull", 500, 2000, 54321, params={"shift": 0.3}, threads=4)
    assert result.value > 0


def test_mc_standard_error_halves_with_four_times_the_replicates(shift_model):
    short = mc_target_mean(shift_model, "shift", 60, 100, 12)
    long = mc_target_mean(shift_model, "shift", 60, 400, 12)
    assert 0.35 <= long.mc_se / short.mc_se <= 0.65


def test_coupling_reduces_ate_variance(shift_model):
    coupled = ate(shift_model, "shift", "null", 100, 200, 21, keep_replicates=True)
    ones = mc_target_mean(shift_model, "shift", 100, 200, 21, keep_replicates=True)
    zeros = mc_target_mean(shift_model, "null", 100, 200, 22, keep_replicates=True)
    independent = ones.replicates - zeros.replicates
    assert np.var(coupled.replicates, ddof=1) <= np.var(independent, ddof=1)
    assert coupled.mc_se < np.std(independent, ddof=1) / np.sqrt(200)
