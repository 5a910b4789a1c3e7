"""
Friend networks on n units.

A network is stored as a friend table: row i lists the friends of unit i in
ascending order, padded with MISSING up to kmax columns. Units are 0-based in
Python; the network CSV and edge-list interchange formats are 1-based.

Generators:
- gen_gnp: undirected Erdos-Renyi G(n, p).
- gen_small_world: Watts-Strogatz ring lattice with edge rewiring.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import pathlib
from typing import Iterable, List, Sequence

import numpy as np
from scipy import sparse

from src.csvio import read_rows, write_rows_atomic
from src.errors import ParameterError, ValidationError

logger = logging.getLogger(__name__)

MISSING = -1


@dataclasses.dataclass(frozen=True, eq=False)
class NetworkMatrix:
    friends: np.ndarray  # (n, kmax) int64, MISSING-padded
    n_friends: np.ndarray  # (n,) int64

    @property
    def n(self) -> int:
        return int(self.friends.shape[0])

    @property
    def kmax(self) -> int:
        return int(self.friends.shape[1])

    def row(self, i: int) -> List[int]:
        return [int(j) for j in self.friends[i] if j != MISSING]

    def rows(self) -> List[List[int]]:
        return [self.row(i) for i in range(self.n)]

    def edge_count(self) -> int:
        return int(self.n_friends.sum()) // 2

    def __eq__(self, other) -> bool:
        if not isinstance(other, NetworkMatrix):
            return NotImplemented
        return np.array_equal(self.friends, other.friends) and np.array_equal(self.n_friends, other.n_friends)

    def __repr__(self) -> str:
        return f"NetworkMatrix(n={self.n}, kmax={self.kmax}, edges={self.edge_count()})"

    @classmethod
    def from_rows(cls, rows: Sequence[Iterable[int]], canonical: bool = True, check: bool = True) -> "NetworkMatrix":
        """Build a friend table from per-unit friend lists (0-based)."""
        lists = [sorted(set(int(j) for j in r)) if canonical else [int(j) for j in r] for r in rows]
        n = len(lists)
        kmax = max((len(r) for r in lists), default=0)
        friends = np.full((n, kmax), MISSING, dtype=np.int64)
        for i, r in enumerate(lists):
            friends[i, : len(r)] = r
        net = cls(friends=friends, n_friends=np.array([len(r) for r in lists], dtype=np.int64))
        if check:
            problems = validate(net)
            if problems:
                raise ValidationError("invalid network", problems)
        return net

    @classmethod
    def empty(cls, n: int) -> "NetworkMatrix":
        return cls(friends=np.zeros((n, 0), dtype=np.int64), n_friends=np.zeros(n, dtype=np.int64))


def validate(net: NetworkMatrix) -> List[str]:
    """Return every invariant violation found in a friend table (empty list means ok)."""
    errors: List[str] = []
    n, kmax = net.friends.shape
    if net.n_friends.shape != (n,):
        return [f"n_friends has shape {net.n_friends.shape}, expected ({n},)"]
    for i in range(n):
        row = net.friends[i]
        real = [int(j) for j in row if j != MISSING]
        if i in real:
            errors.append(f"self-friendship: unit {i + 1} lists itself")
        if len(set(real)) != len(real):
            errors.append(f"duplicate friend in row {i + 1}")
        out_of_range = [j for j in real if j < 0 or j >= n]
        if out_of_range:
            errors.append(f"friend index out of range in row {i + 1}: {[j + 1 for j in out_of_range]}")
        seen_missing = False
        for j in row:
            if j == MISSING:
                seen_missing = True
            elif seen_missing:
                errors.append(f"non-trailing padding in row {i + 1}")
                break
        if int(net.n_friends[i]) != len(real):
            errors.append(f"n_friends mismatch in row {i + 1}: {int(net.n_friends[i])} != {len(real)}")
    expected_kmax = int(net.n_friends.max()) if n else 0
    if kmax != expected_kmax:
        errors.append(f"kmax mismatch: table has {kmax} columns, max friend count is {expected_kmax}")
    return errors


def _check_probability(p: float, name: str = "p") -> None:
    if not (0.0 <= p <= 1.0) or math.isnan(p):
        raise ParameterError(f"{name} must be between 0 and 1, got {p}")


def gen_gnp(n: int, p, rng: np.random.Generator) -> NetworkMatrix:
    """
    Undirected G(n, p): each unordered pair is linked independently.

    `p` may be a scalar or a length-n vector of unit propensities; in the
    latter case the pair {i, j} links with probability (p_i + p_j) / 2.
    """
    if n < 1:
        raise ParameterError(f"n must be positive, got {n}")
    p_arr = np.asarray(p, dtype=float)
    if p_arr.ndim == 0:
        _check_probability(float(p_arr))
    else:
        if p_arr.shape != (n,):
            raise ParameterError(f"unit-varying p must have length {n}, got shape {p_arr.shape}")
        bad = np.flatnonzero(~((p_arr >= 0.0) & (p_arr <= 1.0)))
        if bad.size:
            raise ParameterError(f"p must be between 0 and 1; unit {bad[0] + 1} has {p_arr[bad[0]]}")
    iu, ju = np.triu_indices(n, k=1)
    pair_p = p_arr if p_arr.ndim == 0 else (p_arr[iu] + p_arr[ju]) / 2.0
    linked = rng.random(iu.size) < pair_p
    return _from_pairs(n, iu[linked], ju[linked])


def gen_small_world(n: int, dim: int, nei: int, p: float, rng: np.random.Generator) -> NetworkMatrix:
    """
    Watts-Strogatz small world on a ring: every unit starts linked to its `nei`
    nearest neighbours on each side, then each lattice edge keeps its first
    endpoint and, with probability `p`, moves its second endpoint to a unit
    drawn uniformly among those not already linked (redrawn until valid).
    Rewiring preserves the edge count n * nei.
    """
    if dim != 1:
        raise ParameterError(f"only dim=1 lattices are supported, got dim={dim}")
    if nei < 1:
        raise ParameterError(f"nei must be at least 1, got {nei}")
    if n < 2 * nei + 1:
        raise ParameterError(f"n={n} too small for nei={nei}; need n >= {2 * nei + 1}")
    _check_probability(float(p))

    adjacency = [set() for _ in range(n)]
    edges = []
    for i in range(n):
        for step in range(1, nei + 1):
            j = (i + step) % n
            adjacency[i].add(j)
            adjacency[j].add(i)
            edges.append((i, j))

    rewire = rng.random(len(edges)) < p
    for idx in np.flatnonzero(rewire):
        i, j = edges[idx]
        if len(adjacency[i]) >= n - 1:
            continue  # nowhere to go
        while True:
            k = int(rng.integers(n))
            if k != i and k not in adjacency[i]:
                break
        adjacency[i].discard(j)
        adjacency[j].discard(i)
        adjacency[i].add(k)
        adjacency[k].add(i)
        edges[idx] = (i, k)

    return NetworkMatrix.from_rows(adjacency, check=False)


def _from_pairs(n: int, left: np.ndarray, right: np.ndarray) -> NetworkMatrix:
    rows: List[List[int]] = [[] for _ in range(n)]
    for i, j in zip(left.tolist(), right.tolist()):
        rows[i].append(j)
        rows[j].append(i)
    return NetworkMatrix.from_rows(rows, check=False)


def from_edges(n: int, edges: Iterable[tuple[int, int]]) -> NetworkMatrix:
    """Build an undirected network from 0-based (i, j) pairs."""
    rows: List[set] = [set() for _ in range(n)]
    problems = []
    for i, j in edges:
        i, j = int(i), int(j)
        if i == j:
            problems.append(f"self-loop on unit {i + 1}")
            continue
        if not (0 <= i < n and 0 <= j < n):
            problems.append(f"edge ({i + 1},{j + 1}) outside 1..{n}")
            continue
        rows[i].add(j)
        rows[j].add(i)
    if problems:
        raise ValidationError("invalid edge list", problems)
    return NetworkMatrix.from_rows(rows, check=False)


def from_adjacency(adj) -> NetworkMatrix:
    """Build a network from a symmetric 0/1 adjacency matrix (dense or scipy sparse)."""
    mat = sparse.csr_matrix(adj)
    n, m = mat.shape
    if n != m:
        raise ValidationError("adjacency matrix must be square", [f"shape {mat.shape}"])
    mat.eliminate_zeros()
    problems = []
    diag = mat.diagonal()
    if np.any(diag != 0):
        problems.append(f"nonzero diagonal at units {[int(i) + 1 for i in np.flatnonzero(diag)]}")
    if (mat != mat.T).nnz:
        problems.append("adjacency matrix is not symmetric")
    if mat.nnz and not np.all(mat.data == 1):
        problems.append("adjacency entries must be 0 or 1")
    if problems:
        raise ValidationError("invalid adjacency matrix", problems)
    rows = [mat.indices[mat.indptr[i] : mat.indptr[i + 1]].tolist() for i in range(n)]
    return NetworkMatrix.from_rows(rows, check=False)


def to_adjacency(net: NetworkMatrix) -> sparse.csr_matrix:
    """Sparse n x n 0/1 matrix with adj[i, j] = 1 exactly when j is a friend of i."""
    mask = net.friends != MISSING
    row_idx = np.repeat(np.arange(net.n), net.n_friends)
    col_idx = net.friends[mask]
    data = np.ones(col_idx.size, dtype=np.int64)
    return sparse.csr_matrix((data, (row_idx, col_idx)), shape=(net.n, net.n))


def edge_list(net: NetworkMatrix) -> List[tuple[int, int]]:
    """Undirected edges as 0-based (i, j) with i < j, sorted."""
    return sorted((i, j) for i in range(net.n) for j in net.row(i) if i < j)


def write_network_csv(net: NetworkMatrix, path: pathlib.Path, comments: Sequence[str] = ()) -> pathlib.Path:
    """n rows of kmax fields; 1-based friend indices; empty field = MISSING."""
    rows = ([int(j) + 1 if j != MISSING else None for j in net.friends[i]] for i in range(net.n))
    return write_rows_atomic(pathlib.Path(path), None, rows, comments=comments)


def read_network_csv(path: pathlib.Path) -> NetworkMatrix:
    raw = list(read_rows(pathlib.Path(path)))
    rows = []
    problems = []
    for line_no, fields in enumerate(raw, start=1):
        filled = [bool(f.strip()) for f in fields]
        if any(filled[k] and not filled[k - 1] for k in range(1, len(filled))):
            problems.append(f"non-trailing padding in row {line_no}")
        try:
            rows.append([int(f) - 1 for f in fields if f.strip()])
        except ValueError as exc:
            raise ValidationError(f"{path}: bad friend index on row {line_no}", [str(exc)]) from exc
    net = NetworkMatrix.from_rows(rows, canonical=False, check=False)
    problems.extend(validate(net))
    if problems:
        raise ValidationError(f"{path}: invalid network", problems)
    net = NetworkMatrix.from_rows(rows, canonical=True, check=False)
    logger.debug("read network %s: n=%d kmax=%d", path, net.n, net.kmax)
    return net


def write_edge_list(net: NetworkMatrix, path: pathlib.Path, comments: Sequence[str] = ()) -> pathlib.Path:
    return write_rows_atomic(pathlib.Path(path), None, ((i + 1, j + 1) for i, j in edge_list(net)), comments=comments)
