"""Report figures rendered to files next to the CSV tables."""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_froc_figure(points: Sequence[tuple[float, float]], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    ax.plot(xs, ys, marker=".", lw=1.2)
    ax.set_xscale("symlog", linthresh=0.125)
    ax.set_xlabel("false positives per scan")
    ax.set_ylabel("sensitivity")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def save_uncertainty_hist_figure(
    tp_values: Sequence[float], fp_values: Sequence[float], path, bins: int = 24
) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    all_values = list(tp_values) + list(fp_values)
    hi = max(all_values) if all_values else 1.0
    edges = np.linspace(0.0, hi * 1.02 + 1e-9, bins + 1)
    if tp_values:
        ax.hist(tp_values, bins=edges, alpha=0.6, label="true positives", density=True)
    if fp_values:
        ax.hist(fp_values, bins=edges, alpha=0.6, label="false positives", density=True)
    ax.set_xlabel("fused uncertainty (v_avg)")
    ax.set_ylabel("density")
    ax.legend()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def save_cpm_vs_unc_figure(pairs: Sequence[tuple[float, float]], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([p[0] for p in pairs], [p[1] for p in pairs], marker="o", lw=1.2)
    ax.set_xlabel("uncertainty threshold")
    ax.set_ylabel("CPM")
    ax.grid(alpha=0.3)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def save_f1_heatmap(
    prob_grid: Sequence[float],
    unc_grid: Sequence[float],
    f1_by_cell: Mapping[tuple[float, float], float],
    path,
) -> None:
    matrix = np.zeros((len(unc_grid), len(prob_grid)))
    for ui, u in enumerate(unc_grid):
        for pi, p in enumerate(prob_grid):
            matrix[ui, pi] = f1_by_cell[(float(p), float(u))]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    im = ax.imshow(matrix, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(prob_grid)), [f"{p:g}" for p in prob_grid], rotation=45)
    ax.set_yticks(range(len(unc_grid)), [f"{u:g}" for u in unc_grid])
    ax.set_xlabel("probability threshold")
    ax.set_ylabel("uncertainty threshold")
    fig.colorbar(im, ax=ax, label="F1")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def save_loss_history_figure(history: Sequence[float], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(1, len(history) + 1), history, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.grid(alpha=0.3)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
