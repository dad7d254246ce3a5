"""Figures for runs, sweeps and the shuffled-BN ablation, rendered next to the CSVs."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricsRecord  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_run(records: list[MetricsRecord], path, title: str = "") -> Path:
    """Training loss and pretext accuracy per step, kNN accuracy per eval."""
    steps = [r for r in records if r.kind == "step" and r.loss is not None and math.isfinite(r.loss)]
    evals = [r for r in records if r.kind == "eval" and r.knn_val_acc is not None]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 3.8))
    ax_loss.plot([r.step for r in steps], [r.loss for r in steps], lw=0.8)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("InfoNCE loss")
    ax_acc.plot([r.step for r in steps], [r.pretext_acc for r in steps], lw=0.6, alpha=0.6, label="pretext acc")
    if evals:
        ax_acc.plot([r.step for r in evals], [r.knn_val_acc for r in evals], "o-", label="kNN val acc")
    ax_acc.set_xlabel("step")
    ax_acc.set_ylim(0, 1)
    ax_acc.legend(loc="lower right")
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_sweep(summary: dict[tuple[str, float], tuple[float, float, int]], axis: str, path,
               metric: str = "kNN val acc", log_x: bool = False) -> Path:
    """Mean +/- std over seeds against the swept value, one line per mechanism."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for mech in sorted({m for m, _ in summary}):
        pts = sorted((v, *summary[(m, v)][:2]) for m, v in summary if m == mech)
        xs = [p[0] for p in pts]
        ax.errorbar(xs, [p[1] for p in pts], yerr=[p[2] for p in pts], marker="o", capsize=3, label=mech)
    if log_x:
        ax.set_xscale("log", base=2)
    ax.set_xlabel(axis)
    ax.set_ylabel(metric)
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_momentum(summary: dict[tuple[str, float], tuple[float, float, int]], path) -> Path:
    """Categorical x axis: momentum values are not evenly spaced on any useful scale."""
    rows = sorted((v, *s[:2]) for (_, v), s in summary.items())
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.bar(range(len(rows)), [r[1] for r in rows], yerr=[r[2] for r in rows], capsize=3, color="tab:blue")
    ax.set_xticks(range(len(rows)), [f"{r[0]:g}" for r in rows])
    ax.set_xlabel("momentum m")
    ax.set_ylabel("kNN val acc")
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def plot_shuffle_curves(curves: dict[bool, list[tuple[int, float, float]]], path) -> Path:
    """Pretext accuracy (dashed) and kNN validation accuracy (solid) per epoch."""
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = {True: "tab:blue", False: "tab:red"}
    for flag, rows in curves.items():
        if not rows:
            continue
        label = "shuffle on" if flag else "shuffle off"
        epochs = [r[0] + 1 for r in rows]
        ax.plot(epochs, [r[1] for r in rows], "--", color=colors[flag], label=f"{label}: pretext")
        ax.plot(epochs, [r[2] for r in rows], "-", color=colors[flag], label=f"{label}: kNN val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)
