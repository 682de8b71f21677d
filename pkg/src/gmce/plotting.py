"""Figure helpers. Everything renders to files through the Agg backend."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_write_text  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    # fixed ids so identical data gives byte-identical SVG
    "svg.hashsalt": "gmce",
    "svg.fonttype": "none",
}


def _save(fig, path):
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    atomic_write_text(Path(path), buf.getvalue())


def reward_heatmaps(tables: dict, path, cmap: str = "viridis") -> None:
    """One annotated heatmap per named 2-d array, side by side, row 0 at the bottom."""
    with plt.rc_context(STYLE):
        n = len(tables)
        fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.0), squeeze=False)
        for ax, (name, grid) in zip(axes[0], tables.items()):
            grid = np.atleast_2d(np.asarray(grid, dtype=float))
            im = ax.imshow(grid, origin="lower", cmap=cmap)
            for (i, j), v in np.ndenumerate(grid):
                ax.text(j, i, f"{v:.2g}", ha="center", va="center", fontsize=6, color="w")
            ax.set_title(name)
            ax.set_xticks(range(grid.shape[1]))
            ax.set_yticks(range(grid.shape[0]))
            fig.colorbar(im, ax=ax, shrink=0.8)
        fig.tight_layout()
        _save(fig, path)


def path_probability_figure(mu_values, path_probs: dict, ratio_r4, ratio, path) -> None:
    """Left: path probabilities against mu of the shared link. Right: probability ratio against R(4)."""
    with plt.rc_context(STYLE):
        fig, (left, right) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        for label, probs in path_probs.items():
            left.plot(mu_values, probs, label=label)
        left.set_xscale("log")
        left.set_xlabel("mu(1)")
        left.set_ylabel("path probability")
        left.legend(frameon=False)
        right.plot(ratio_r4, ratio, color="k")
        right.set_xlabel("R(4)")
        right.set_ylabel("P({0,1,3,5}) / P({0,2,5})")
        fig.tight_layout()
        _save(fig, path)


def ll_trace_figure(traces: dict, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        for name, trace in traces.items():
            ax.plot(np.arange(len(trace)), trace, label=name)
        ax.set_xlabel("iteration")
        ax.set_ylabel("training log-likelihood")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)
