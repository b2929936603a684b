"""Render figures from a run's metrics.csv, next to the CSV itself."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import UsageError
from .metrics import read_metrics

FIGSIZE = (6.0, 3.8)


def _finite(pairs):
    xs, ys = [], []
    for x, y in pairs:
        if not math.isnan(y):
            xs.append(x)
            ys.append(y)
    return xs, ys


def render_report(out_dir: str | Path) -> list[Path]:
    """Write PNG figures for whatever phases the metrics file contains."""
    out_dir = Path(out_dir)
    metrics_path = out_dir / "metrics.csv"
    if not metrics_path.is_file():
        raise UsageError(f"no metrics.csv under {out_dir}")
    rows = read_metrics(metrics_path)
    written: list[Path] = []

    train = [r for r in rows if r.phase == "meta_train"]
    if train:
        fig, axes = plt.subplots(1, 2, figsize=(FIGSIZE[0] * 2, FIGSIZE[1]))
        for ax, field, label in (
            (axes[0], "model_meta_loss", "model meta-loss"),
            (axes[1], "critic_loss", "critic loss"),
        ):
            xs, ys = _finite((r.iteration, getattr(r, field)) for r in train)
            ax.plot(xs, ys, lw=1.2)
            ax.set_xlabel("iteration")
            ax.set_ylabel(label)
            ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = out_dir / "fig_losses.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

        xs, ys = _finite((r.samples_collected, r.mean_return) for r in train)
        if xs:
            fig, ax = plt.subplots(figsize=FIGSIZE)
            ax.plot(xs, ys, marker="o", ms=3, lw=1.2)
            ax.set_xlabel("environment samples")
            ax.set_ylabel("mean return (held-out tasks)")
            ax.grid(True, alpha=0.3)
            fig.tight_layout()
            path = out_dir / "fig_returns.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)

    pre = {r.iteration: r.mean_return for r in rows if r.phase == "adapt_pre"}
    post = {r.iteration: r.mean_return for r in rows if r.phase == "adapt"}
    if pre and post:
        tasks = sorted(set(pre) & set(post))
        fig, ax = plt.subplots(figsize=FIGSIZE)
        width = 0.38
        ax.bar([t - width / 2 for t in tasks], [pre[t] for t in tasks], width, label="context only")
        ax.bar([t + width / 2 for t in tasks], [post[t] for t in tasks], width, label="with relabeling")
        ax.set_xlabel("test task")
        ax.set_ylabel("return")
        ax.legend()
        ax.grid(True, axis="y", alpha=0.3)
        fig.tight_layout()
        path = out_dir / "fig_adapt.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    evals = [r for r in rows if r.phase == "eval"]
    if evals:
        fig, ax = plt.subplots(figsize=FIGSIZE)
        ax.bar([r.iteration for r in evals], [r.mean_return for r in evals])
        ax.set_xlabel("task")
        ax.set_ylabel("mean return")
        ax.grid(True, axis="y", alpha=0.3)
        fig.tight_layout()
        path = out_dir / "fig_eval.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    if not written:
        raise UsageError("metrics.csv held no rows any figure knows how to draw")
    return written
