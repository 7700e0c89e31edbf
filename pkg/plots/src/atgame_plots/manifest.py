"""Manifest runner: render a batch of figures described by one JSON file.

Manifest schema: a list of figure specs,
    {"kind": "curves",  "inputs": [...], "columns": [...], "x": "epoch",
     "out": "fig.png", "title": "..."}
    {"kind": "heatmap", "inputs": ["confusion.json"], "out": "fig.png"}
    {"kind": "sweep",   "inputs": ["summary.csv"], "columns": [...],
     "out": "fig.png"}
Every referenced input must exist before anything renders.
"""

from __future__ import annotations

import argparse
import json
import os

from .curves import plot_curves
from .heatmap import plot_heatmap
from .sweep import DEFAULT_COLUMNS, plot_sweep


def run_manifest(path: str) -> list[str]:
    with open(path) as fh:
        specs = json.load(fh)
    if not isinstance(specs, list):
        raise ValueError(f"{path}: manifest must be a list of figure specs")
    for i, spec in enumerate(specs):
        for key in ("kind", "inputs", "out"):
            if key not in spec:
                raise ValueError(f"{path}[{i}]: missing {key!r}")
        for inp in spec["inputs"]:
            if not os.path.exists(inp):
                raise FileNotFoundError(f"{path}[{i}]: input does not exist: {inp}")

    outputs = []
    for spec in specs:
        kind, inputs, out = spec["kind"], spec["inputs"], spec["out"]
        title = spec.get("title")
        if kind == "curves":
            outputs.append(plot_curves(inputs, spec.get("columns", ["test_rob_acc"]),
                                       out, title, spec.get("x", "epoch")))
        elif kind == "heatmap":
            outputs.append(plot_heatmap(inputs[0], out, title))
        elif kind == "sweep":
            outputs.append(plot_sweep(inputs[0], out,
                                      spec.get("columns", list(DEFAULT_COLUMNS)),
                                      title))
        else:
            raise ValueError(f"unknown figure kind {kind!r}")
    return outputs


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=run_manifest.__doc__)
    parser.add_argument("manifest", help="JSON manifest of figure specs")
    args = parser.parse_args(argv)
    for out in run_manifest(args.manifest):
        print(out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
