import pathlib

import numpy as np
import pytest

from src.netgraph import NetworkMatrix
from src.semodel import Action, DagModel, NetworkSpec, NodeSpec

ROOT = pathlib.Path(__file__).resolve().parents[1]
SCENARIO_DIR = ROOT / "data" / "scenarios"


@pytest.fixture
def line_net():
    """Units 1-2-3 in a line: friends {2}, {1,3}, {2} (0-based below)."""
    return NetworkMatrix.from_rows([[1], [0, 2], [1]])


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


def build_shift_model(p: float = 0.05, n_test: int = 200) -> DagModel:
    """Binary W, normal exposure, binary outcome reading friends' W and A."""
    model = DagModel("shift_model", constants={"b_sumW": 0.3}, outcome="Y")
    model.add_network(NetworkSpec.build("net", "gnp", p=p))
    model.add_node(NodeSpec.build("W", "rbern", prob=0.5))
    model.add_node(NodeSpec.build("A.obs", "rnorm", mean="0.5*W", sd=1))
    model.add_node(NodeSpec.build("A", "rconst", const="A.obs"))
    model.add_node(
        NodeSpec.build(
            "Y",
            "rbern",
            replace_na_w0=True,
            prob="plogis(-0.5 + 0.6*A + b_sumW*sum(W[[1:Kmax]]) + 0.1*sum(A[[1:Kmax]]))",
        )
    )
    model.add_action(Action("shift", (NodeSpec.build("A", "rconst", const="A.obs + shift"),), {"shift": 0.5}))
    model.add_action(Action("null", (NodeSpec.build("A", "rconst", const="A.obs"),)))
    return model.finalize(n_test)


@pytest.fixture(scope="session")
def shift_model():
    return build_shift_model()


@pytest.fixture
def scenario_dir():
    return SCENARIO_DIR
