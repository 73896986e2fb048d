"""Evaluation reports: delimited metric tables plus matplotlib figures
rendered to files next to them."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def write_metrics_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("view,psnr,ssim\n")
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def plot_per_view_metrics(path, rows_a: list[dict], rows_b: list[dict],
                          label_a: str = "stage 2", label_b: str = "stage 3") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [r["view"] for r in rows_b]
    x = np.arange(len(names))
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for ax, key in zip(axes, ("psnr", "ssim")):
        va = [r[key] if math.isfinite(r[key]) else 99.0 for r in rows_a]
        vb = [r[key] if math.isfinite(r[key]) else 99.0 for r in rows_b]
        ax.bar(x - 0.2, va, width=0.4, label=label_a)
        ax.bar(x + 0.2, vb, width=0.4, label=label_b)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=60, fontsize=7)
        ax.set_ylabel(key.upper())
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_curves(path, histories: dict) -> None:
    """One panel per stage; log-scale loss terms over iterations."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(histories)
    fig, axes = plt.subplots(1, n, figsize=(5 * n, 3.6), squeeze=False)
    for ax, (name, hist) in zip(axes[0], histories.items()):
        for term, values in hist.terms.items():
            if len(values) and max(values) > 0:
                ax.plot(hist.iterations, np.maximum(values, 1e-12), label=term, lw=0.8)
        ax.set_yscale("log")
        ax.set_title(name)
        ax.set_xlabel("iteration")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_summary(path, summary: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} {v}" for k, v in summary.items()]
    path.write_text("\n".join(lines) + "\n")


def write_run_report(outdir, rows_stage2, rows_stage3, histories, summary) -> None:
    outdir = Path(outdir)
    write_metrics_csv(outdir / "metrics_stage2.csv", rows_stage2)
    write_metrics_csv(outdir / "metrics_stage3.csv", rows_stage3)
    plot_per_view_metrics(outdir / "psnr_per_view.png", rows_stage2, rows_stage3)
    plot_training_curves(outdir / "training_curves.png", histories)
    write_summary(outdir / "summary.txt", summary)


def write_eval_report(outdir, rows: list[dict]) -> None:
    outdir = Path(outdir)
    write_metrics_csv(outdir / "metrics.csv", rows)
    path = outdir / "metrics.png"
    names = [r["view"] for r in rows]
    x = np.arange(len(names))
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for ax, key in zip(axes, ("psnr", "ssim")):
        vals = [r[key] if math.isfinite(r[key]) else 99.0 for r in rows]
        ax.bar(x, vals, width=0.6)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=60, fontsize=7)
        ax.set_ylabel(key.upper())
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
