#!/usr/bin/env python3
"""
Basic validation for network CSV files (one row per unit, 1-based friend indices).

Checks:
- Structure: friend indices are integers in 1..n, no unit lists itself, no
  duplicate friends, padding only at the end of a row.
- Symmetry: j is a friend of i exactly when i is a friend of j.
- Isolated units are reported but do not fail validation.
"""

from __future__ import annotations

import argparse
import pathlib
import sys
from typing import List

import numpy as np

ROOT = pathlib.Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from src.csvio import read_rows  # noqa: E402
from src.netgraph import NetworkMatrix, to_adjacency, validate  # noqa: E402


def load_network(path: pathlib.Path) -> tuple[NetworkMatrix, List[str]]:
    rows: List[List[int]] = []
    errors: List[str] = []
    for line_no, fields in enumerate(read_rows(path), start=1):
        filled = [bool(f.strip()) for f in fields]
        if any(filled[k] and not filled[k - 1] for k in range(1, len(filled))):
            errors.append(f"non-trailing padding in row {line_no}")
        try:
            rows.append([int(f) - 1 for f in fields if f.strip()])
        except ValueError:
            errors.append(f"non-integer friend index in row {line_no}")
            rows.append([])
    net = NetworkMatrix.from_rows(rows, canonical=False, check=False)
    errors.extend(validate(net))
    return net, errors


def validate_symmetry(net: NetworkMatrix) -> List[str]:
    if any(j < 0 or j >= net.n for r in net.rows() for j in r):
        return []
    adj = to_adjacency(net)
    diff = (adj - adj.T).tocoo()
    errors = []
    for i, j, v in zip(diff.row, diff.col, diff.data):
        if v > 0:
            errors.append(f"asymmetric friendship: {j + 1} is a friend of {i + 1} but not the reverse")
    return errors


def main() -> None:
    parser = argparse.ArgumentParser(description="Validate a network CSV file.")
    parser.add_argument("path", help="Network CSV (n rows, 1-based friend indices).")
    args = parser.parse_args()

    path = pathlib.Path(args.path)
    if not path.exists():
        print(f"Missing network file: {path}")
        sys.exit(1)

    net, errors = load_network(path)
    errors.extend(validate_symmetry(net))
    if errors:
        print(f"Validation failed with {len(errors)} issue(s):")
        for e in errors:
            print(f"- {e}")
        sys.exit(1)

    degree = net.n_friends
    isolated = np.flatnonzero(degree == 0)
    print(
        f"Validation passed: n={net.n}, edges={net.edge_count()}, "
        f"degree min/mean/max={degree.min() if net.n else 0}/{degree.mean() if net.n else 0:.2f}/{net.kmax}"
    )
    if isolated.size:
        print(f"Isolated units ({isolated.size}): {', '.join(str(i + 1) for i in isolated[:20])}")


if __name__ == "__main__":
    main()
