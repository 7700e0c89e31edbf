"""Readers for the artifact file schemas.

Metrics and summary CSVs may start with ``# config_hash=...`` comment
lines; confusion artifacts are either the JSON document (with "matrix"
and "counts" keys) or a bare numeric CSV grid.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np


def read_csv_rows(path: str) -> list[dict[str, float]]:
    """Rows of a hash-prefixed CSV as float dicts (empty list for no rows)."""
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        return []
    reader = csv.DictReader(lines)
    rows = []
    for raw in reader:
        row = {}
        for key, value in raw.items():
            try:
                row[key] = float(value)
            except (TypeError, ValueError):
                row[key] = value
        rows.append(row)
    return rows


def read_matrix(path: str) -> np.ndarray:
    """A confusion matrix from either the JSON artifact or a CSV grid."""
    if path.endswith(".json"):
        with open(path) as fh:
            doc = json.load(fh)
        return np.asarray(doc["matrix"], dtype=np.float64)
    rows = []
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            rows.append([float(v) for v in ln.split(",")])
    if not rows:
        raise ValueError(f"{path}: no matrix rows")
    return np.asarray(rows, dtype=np.float64)


def run_name(path: str) -> str:
    """A short legend label for a metrics file: its run directory name."""
    parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
    return parent or os.path.basename(path)
