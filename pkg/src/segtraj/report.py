"""Rendering results to files: every CLI command that reports numbers
writes a delimited file and a matching figure next to it."""

from __future__ import annotations

import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import _fmt
from .training import LOSS_KEYS


def write_result_csv(result: dict, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("key", "value"))
        for k in sorted(result):
            v = result[k]
            w.writerow([k, _fmt(v) if isinstance(v, float) else v])


def write_matrix_csv(mat: np.ndarray, path: str, index_name: str = "row") -> None:
    mat = np.asarray(mat)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([index_name] + [f"c{j}" for j in range(mat.shape[1])])
        for i, row in enumerate(mat):
            w.writerow([i] + [_fmt(v) for v in row])


def save_loss_curve(trace: list, path: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    epochs = [row["epoch"] for row in trace]
    for key in LOSS_KEYS:
        ax.plot(epochs, [row[key] for row in trace],
                label=key, linewidth=2 if key == "total" else 1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8, ncol=2)
    ax.set_title("pretraining losses")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_eval_bars(result: dict, path: str) -> None:
    pairs = [(k[len("mae_"):], result[k]) for k in result if k.startswith("mae_")]
    labels = [p[0] for p in pairs]
    vals = [p[1] for p in pairs]
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.bar(labels, vals, color=["#3070b0", "#b0b0b0"][:len(vals)])
    ax.set_ylabel("MAE")
    ax.set_title(result.get("task", "eval"))
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.4g}", ha="center", va="bottom", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_similarity_trace(model, grid, anchors: list, path: str) -> None:
    """Mean cosine similarity of each slice's segment states against the
    first anchor's; flat at 1.0 means the states carry no slice signal."""
    from .evaltasks import segment_state_table
    ref = segment_state_table(model, grid, anchors[0])
    refn = ref / ref.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    sims = []
    for a in anchors:
        x = segment_state_table(model, grid, a)
        xn = x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        sims.append(float((xn * refn).sum(dim=-1).mean()))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(anchors, sims, marker="o", markersize=3)
    ax.set_xlabel("slice")
    ax.set_ylabel(f"mean cosine vs slice {anchors[0]}")
    ax.set_ylim(min(0.0, min(sims)) - 0.05, 1.05)
    ax.set_title("segment state drift across slices")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    sim_csv = os.path.splitext(path)[0] + ".csv"
    with open(sim_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("slice", "mean_cosine"))
        for a, s in zip(anchors, sims):
            w.writerow([a, _fmt(s)])
