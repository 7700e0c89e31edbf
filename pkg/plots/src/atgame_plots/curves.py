"""Training-curve figures: metric columns over epochs, runs overlaid."""

from __future__ import annotations

import argparse

import matplotlib.pyplot as plt

from .io import read_csv_rows, run_name


def plot_curves(metrics_paths: list[str], columns: list[str], out: str,
                title: str | None = None, x_column: str = "epoch") -> str:
    """Overlay the named columns of each metrics CSV against the x column.

    Works for training metrics (x = epoch) and landscape curves (x = t).
    Single-row files plot as lone markers; files with no data rows produce
    a labeled empty axes instead of an error.
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    drew = False
    for path in metrics_paths:
        rows = read_csv_rows(path)
        label_base = run_name(path)
        for col in (x_column, *columns):
            if rows and col not in rows[0]:
                raise KeyError(f"{path}: missing column {col!r}")
        for col in columns:
            xs = [r[x_column] for r in rows]
            ys = [r[col] for r in rows]
            label = f"{label_base}:{col}" if len(columns) > 1 else label_base
            ax.plot(xs, ys, marker="o" if len(xs) <= 1 else None,
                    markersize=4, label=label)
            drew = drew or bool(xs)
    ax.set_xlabel(x_column)
    ax.set_ylabel(", ".join(columns))
    if title:
        ax.set_title(title)
    if drew:
        ax.legend(fontsize=8)
    else:
        ax.set_title(title or "no data rows")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=plot_curves.__doc__)
    parser.add_argument("metrics", nargs="+", help="metrics.csv paths")
    parser.add_argument("--columns", nargs="+", default=["test_rob_acc"])
    parser.add_argument("--x", default="epoch", help="x-axis column")
    parser.add_argument("--out", required=True)
    parser.add_argument("--title", default=None)
    args = parser.parse_args(argv)
    print(plot_curves(args.metrics, args.columns, args.out, args.title, args.x))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
