"""Figures rendered next to the CSV outputs (Agg backend, no display needed)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..scale_search import SweepRecord  # noqa: E402


def plot_sweep(records: Sequence[SweepRecord], path, title: str = "") -> Path:
    """Normalized metric curves against the scale factor, one line per metric."""
    recs = sorted(records, key=lambda r: r.n_s)
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for k in recs[0].normalized:
        ax.plot([r.n_s for r in recs], [r.normalized[k] for r in recs], label=k, lw=1.4)
    ax.set_xlabel("normalized scale factor")
    ax.set_ylabel("value / min")
    ax.set_yscale("log")
    ax.set_title(title or recs[0].layer, fontsize=10)
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_histogram(rows: Sequence[dict], path, title: str = "") -> Path:
    lefts = [r["bin_left"] for r in rows]
    widths = [r["bin_right"] - r["bin_left"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    ax.bar(lefts, [r["count_before"] for r in rows], width=widths, align="edge", alpha=0.5, label="FP")
    ax.bar(lefts, [r["count_after"] for r in rows], width=widths, align="edge", alpha=0.5, label="corrected")
    ax.set_xlabel("activation value")
    ax.set_ylabel("count")
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_ablation(summary: Sequence[dict], path, title: str = "") -> Path:
    """Mean val accuracy (bars, std whiskers) and mean overfit gap per option set."""
    names = [s["option"] for s in summary]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.6))
    a1.bar(names, [s["val_mean"] for s in summary], yerr=[s["val_std"] for s in summary], capsize=3, color="#4c72b0")
    a1.set_ylabel("val accuracy (%)")
    lo = min(s["val_mean"] - s["val_std"] for s in summary)
    a1.set_ylim(max(0.0, lo - 5), 100)
    a2.bar(names, [s["gap_mean"] for s in summary], yerr=[s["gap_std"] for s in summary], capsize=3, color="#dd8452")
    a2.set_ylabel("calib - val (points)")
    a2.axhline(0, color="k", lw=0.6)
    for ax in (a1, a2):
        ax.tick_params(axis="x", labelrotation=20, labelsize=8)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
