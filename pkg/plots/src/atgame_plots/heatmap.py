"""Confusion-matrix heatmaps from the JSON or CSV artifacts."""

from __future__ import annotations

import argparse

import matplotlib.pyplot as plt

from .io import read_matrix


def plot_heatmap(matrix_path: str, out: str, title: str | None = None) -> str:
    mat = read_matrix(matrix_path)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(mat, cmap="viridis", vmin=0.0)
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    if mat.shape[0] <= 12:
        ax.set_xticks(range(mat.shape[1]))
        ax.set_yticks(range(mat.shape[0]))
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=plot_heatmap.__doc__)
    parser.add_argument("matrix", help="confusion.json or confusion.csv")
    parser.add_argument("--out", required=True)
    parser.add_argument("--title", default=None)
    args = parser.parse_args(argv)
    print(plot_heatmap(args.matrix, args.out, args.title))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
