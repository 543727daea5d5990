"""Matplotlib figures rendered next to the delimited reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

VLN_BARS = ("sr", "spl", "cls")


def metrics_figure(reports, path) -> None:
    """Grouped per-fold bars: percentage metrics per task plus dialog progress."""
    tasks = sorted(reports)
    fig, axes = plt.subplots(1, len(tasks), figsize=(5.5 * len(tasks), 3.6),
                             squeeze=False)
    for ax, task in zip(axes[0], tasks):
        report = reports[task]
        folds = sorted(report.folds)
        if task == "ndh":
            vals = [report.folds[f].get("progress", 0.0) for f in folds]
            ax.bar(folds, vals, color="#4878a8")
            ax.set_ylabel("goal progress (m)")
        else:
            width = 0.8 / len(VLN_BARS)
            xs = np.arange(len(folds))
            for i, key in enumerate(VLN_BARS):
                vals = [report.folds[f].get(key, 0.0) for f in folds]
                ax.bar(xs + i * width, vals, width, label=key.upper())
            ax.set_xticks(xs + width)
            ax.set_xticklabels(folds)
            ax.set_ylabel("percent")
            ax.legend(fontsize=8)
        ax.set_title(task)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def curves_figure(train_log, path) -> None:
    """Loss curves over training steps."""
    steps = [r["step"] for r in train_log]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [r["l_nav"] for r in train_log], label="navigation loss")
    env = [(r["step"], r["l_env"]) for r in train_log if r.get("l_env") is not None]
    if env:
        ax.plot([s for s, _ in env], [v for _, v in env], label="environment loss")
    bc = [(r["step"], r["bc_loss"]) for r in train_log if r.get("bc_loss") is not None]
    if bc:
        ax.plot([s for s, _ in bc], [v for _, v in bc], label="cloning loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def latents_figure(latents: np.ndarray, labels, path) -> None:
    """Scatter of the two leading principal components, colored by house."""
    centered = latents - latents.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ vt[:2].T
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for lab in np.unique(labels):
        mask = labels == lab
        ax.scatter(coords[mask, 0], coords[mask, 1], s=8, label=f"house {lab}")
    ax.set_xlabel("pc 1")
    ax.set_ylabel("pc 2")
    ax.legend(fontsize=7, markerscale=1.5)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def gap_figure(rows, path, value_key="gap", label_key="cell") -> None:
    """Bar chart of seen-unseen gaps per ablation cell."""
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(rows)), 3.5))
    labels = [str(r[label_key]) for r in rows]
    vals = [r[value_key] for r in rows]
    ax.bar(labels, vals, color="#a85448")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_ylabel("seen - unseen")
    ax.tick_params(axis="x", labelrotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
