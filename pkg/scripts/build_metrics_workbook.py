#!/usr/bin/env python3
"""
Build a workbook with one read-only sheet per metrics table.

Input: metrics / sweep CSVs written by `netsem experiment` and `netsem sweep`
Output: data/output/Metrics.xlsx with sheets named after the CSV stems
"""

from __future__ import annotations

import argparse
import pathlib
import sys
from typing import List

import openpyxl

ROOT = pathlib.Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import config  # noqa: E402
from src.csvio import read_rows  # noqa: E402

# Excel caps sheet titles at 31 characters.
MAX_TITLE = 31


def _cell(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def build_workbook(inputs: List[pathlib.Path], export_path: pathlib.Path) -> None:
    wb = openpyxl.Workbook()
    wb.remove(wb.active)
    used = set()
    for path in inputs:
        title = path.stem[:MAX_TITLE]
        suffix = 2
        while title in used:
            tag = f"_{suffix}"
            title = path.stem[: MAX_TITLE - len(tag)] + tag
            suffix += 1
        used.add(title)
        ws = wb.create_sheet(title)
        for row in read_rows(path):
            ws.append([_cell(v) for v in row])
        ws.freeze_panes = "A2"
        ws.protection.sheet = True
    export_path.parent.mkdir(parents=True, exist_ok=True)
    wb.save(export_path)
    print(f"Wrote metrics workbook: {export_path} ({len(inputs)} sheet(s))")


def main() -> None:
    parser = argparse.ArgumentParser(description="Collect metrics CSVs into one workbook.")
    parser.add_argument("inputs", nargs="*", help="Metrics CSVs (default: every *.csv in the output directory).")
    parser.add_argument("--output-dir", default=str(config.OUTPUT_DIR), help="Directory searched when no inputs are given.")
    parser.add_argument("--export", default=str(config.OUTPUT_DIR / "Metrics.xlsx"), help="Output workbook path.")
    args = parser.parse_args()

    if args.inputs:
        inputs = [pathlib.Path(p) for p in args.inputs]
    else:
        inputs = sorted(pathlib.Path(args.output_dir).glob("*.csv"))
    if not inputs:
        print("No metrics CSVs found; nothing to do.")
        sys.exit(1)
    build_workbook(inputs, pathlib.Path(args.export))


if __name__ == "__main__":
    main()
