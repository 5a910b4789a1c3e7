"""
CSV plumbing shared by the network, dataset and metrics writers.

Every file is written once: rows go to a temporary sibling which is renamed
over the destination, so readers never observe a half-written artifact.
"""

from __future__ import annotations

import csv
import io
import math
import os
import pathlib
import tempfile
from typing import Iterable, Iterator, List, Sequence


def format_value(value) -> str:
    """Format a cell; floats keep 17 significant digits, NaN/None become empty."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    try:
        x = float(value)
    except (TypeError, ValueError):
        return str(value)
    if math.isnan(x):
        return ""
    return format(x, ".17g")


def write_rows_atomic(
    path: pathlib.Path,
    header: Sequence[str] | None,
    rows: Iterable[Sequence],
    comments: Sequence[str] = (),
) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    if header is not None:
        writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    write_text_atomic(path, buf.getvalue())
    return path


def write_text_atomic(path: pathlib.Path, text: str) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_rows(path: pathlib.Path) -> Iterator[List[str]]:
    """Yield CSV rows, skipping '#' comment lines."""
    with pathlib.Path(path).open(newline="", encoding="utf-8") as f:
        data = (line for line in f if not line.startswith("#"))
        yield from csv.reader(data)
