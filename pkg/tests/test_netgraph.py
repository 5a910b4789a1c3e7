import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.errors import ParameterError, ValidationError
from src.netgraph import (
    MISSING,
    NetworkMatrix,
    edge_list,
    from_adjacency,
    from_edges,
    gen_gnp,
    gen_small_world,
    read_network_csv,
    to_adjacency,
    validate,
    write_edge_list,
    write_network_csv,
)


def _is_symmetric(net: NetworkMatrix) -> bool:
    adj = to_adjacency(net)
    return (adj != adj.T).nnz == 0


def test_from_rows_sorts_and_pads():
    net = NetworkMatrix.from_rows([[2, 1], [0], [0], []])
    assert net.kmax == 2
    assert net.friends.tolist() == [[1, 2], [0, MISSING], [0, MISSING], [MISSING, MISSING]]
    assert net.n_friends.tolist() == [2, 1, 1, 0]
    assert net.edge_count() == 2


def test_validate_reports_every_violation():
    friends = np.array([[0, MISSING], [MISSING, 0], [1, 1]])
    net = NetworkMatrix(friends=friends, n_friends=np.array([1, 1, 2]))
    problems = validate(net)
    assert any("self-friendship" in p for p in problems)
    assert any("non-trailing padding" in p for p in problems)
    assert any("duplicate friend in row 3" in p for p in problems)


def test_validate_flags_kmax_and_count_mismatch():
    net = NetworkMatrix(friends=np.array([[1, MISSING], [0, MISSING]]), n_friends=np.array([1, 2]))
    problems = validate(net)
    assert any("n_friends mismatch in row 2" in p for p in problems)


def test_gnp_extremes(rng):
    empty = gen_gnp(5, 0.0, rng)
    assert empty.kmax == 0
    assert empty.rows() == [[], [], [], [], []]
    full = gen_gnp(4, 1.0, rng)
    assert full.kmax == 3
    assert full.rows() == [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]


@pytest.mark.parametrize("p", [-0.1, 1.5, float("nan")])
def test_gnp_rejects_bad_probability(rng, p):
    with pytest.raises(ParameterError):
        gen_gnp(10, p, rng)


def test_gnp_is_symmetric_and_valid():
    for seed in range(20):
        net = gen_gnp(40, 0.1, np.random.default_rng(seed))
        assert validate(net) == []
        assert _is_symmetric(net)


def test_gnp_unit_varying_probability(rng):
    p = np.zeros(30)
    p[0] = 1.0
    net = gen_gnp(30, p, rng)
    assert all(0 in (i, j) for i, j in edge_list(net))
    assert net.n_friends[0] > 0


def test_gnp_edge_density_close_to_p():
    n, p = 200, 0.05
    net = gen_gnp(n, p, np.random.default_rng(7))
    pairs = n * (n - 1) / 2
    se = np.sqrt(p * (1 - p) / pairs)
    assert abs(net.edge_count() / pairs - p) < 5 * se


def test_small_world_without_rewiring_is_ring_lattice(rng):
    n, nei = 10, 3
    net = gen_small_world(n, 1, nei, 0.0, rng)
    for i in range(n):
        expected = sorted({(i + k) % n for k in range(1, nei + 1)} | {(i - k) % n for k in range(1, nei + 1)})
        assert net.row(i) == expected
    assert set(net.n_friends.tolist()) == {2 * nei}


@pytest.mark.parametrize("p", [0.0, 0.3, 1.0])
def test_small_world_keeps_edge_count(p):
    for seed in range(25):
        net = gen_small_world(60, 1, 3, p, np.random.default_rng(seed))
        assert net.edge_count() == 60 * 3
        assert validate(net) == []
        assert _is_symmetric(net)


def test_small_world_rejects_bad_arguments(rng):
    with pytest.raises(ParameterError):
        gen_small_world(20, 2, 3, 0.1, rng)
    with pytest.raises(ParameterError):
        gen_small_world(6, 1, 3, 0.1, rng)
    with pytest.raises(ParameterError):
        gen_small_world(20, 1, 3, 1.2, rng)


def test_from_edges_builds_line():
    net = from_edges(3, [(0, 1), (1, 2)])
    assert net.rows() == [[1], [0, 2], [1]]
    assert net.kmax == 2


def test_from_edges_rejects_self_loop_and_range():
    with pytest.raises(ValidationError):
        from_edges(3, [(1, 1)])
    with pytest.raises(ValidationError):
        from_edges(3, [(0, 3)])


def test_from_adjacency_rejects_asymmetric_and_diagonal():
    with pytest.raises(ValidationError, match="not symmetric"):
        from_adjacency(np.array([[0, 1], [0, 0]]))
    with pytest.raises(ValidationError, match="diagonal"):
        from_adjacency(np.array([[1, 0], [0, 0]]))


@st.composite
def symmetric_adjacency(draw):
    n = draw(st.integers(min_value=1, max_value=12))
    upper = draw(st.lists(st.booleans(), min_size=n * (n - 1) // 2, max_size=n * (n - 1) // 2))
    adj = np.zeros((n, n), dtype=int)
    iu = np.triu_indices(n, k=1)
    adj[iu] = upper
    return adj + adj.T


@given(symmetric_adjacency())
@settings(max_examples=60, deadline=None)
def test_adjacency_round_trip(adj):
    net = from_adjacency(adj)
    assert validate(net) == []
    assert np.array_equal(to_adjacency(net).toarray(), adj)


def test_network_csv_round_trip(tmp_path, rng):
    net = gen_gnp(25, 0.08, rng)
    path = write_network_csv(net, tmp_path / "net.csv")
    assert read_network_csv(path) == net


def test_network_csv_is_one_based(tmp_path, line_net):
    path = write_network_csv(line_net, tmp_path / "line.csv")
    assert path.read_text().splitlines() == ["2,", "1,3", "2,"]


def test_network_csv_keeps_isolated_units(tmp_path):
    net = NetworkMatrix.from_rows([[1], [0], [], []])
    assert read_network_csv(write_network_csv(net, tmp_path / "iso.csv")) == net


def test_read_network_csv_rejects_bad_rows(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("2,,3\n1\n1\n")
    with pytest.raises(ValidationError, match="non-trailing padding"):
        read_network_csv(path)
    path.write_text("1\n1\n")
    with pytest.raises(ValidationError, match="self-friendship"):
        read_network_csv(path)


def test_write_edge_list(tmp_path, line_net):
    path = write_edge_list(line_net, tmp_path / "edges.csv")
    assert path.read_text().splitlines() == ["1,2", "2,3"]
