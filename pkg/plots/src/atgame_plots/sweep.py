"""Sweep figures: best/final robustness and the overfitting gap per point."""

from __future__ import annotations

import argparse

import matplotlib.pyplot as plt

from .io import read_csv_rows


DEFAULT_COLUMNS = ("best_test_rob_acc", "final_test_rob_acc", "robust_gap")


def plot_sweep(summary_path: str, out: str, columns=DEFAULT_COLUMNS,
               title: str | None = None) -> str:
    """Line-per-column view of a sweep summary CSV over its axis values.

    A summary with no rows renders a labeled empty axes.
    """
    rows = read_csv_rows(summary_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        axis = str(rows[0].get("axis", "value"))
        xs = [r["value"] for r in rows]
        for col in columns:
            if col not in rows[0]:
                raise KeyError(f"{summary_path}: missing column {col!r}")
            ax.plot(xs, [r[col] for r in rows],
                    marker="o", markersize=4, label=col)
        ax.set_xlabel(axis)
        ax.legend(fontsize=8)
    else:
        ax.set_xlabel("value")
        ax.set_title(title or "no data rows")
    ax.set_ylabel("accuracy / gap")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=plot_sweep.__doc__)
    parser.add_argument("summary", help="summary.csv from a sweep")
    parser.add_argument("--columns", nargs="+", default=list(DEFAULT_COLUMNS))
    parser.add_argument("--out", required=True)
    parser.add_argument("--title", default=None)
    args = parser.parse_args(argv)
    print(plot_sweep(args.summary, args.out, args.columns, args.title))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
