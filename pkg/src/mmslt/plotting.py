"""Figures for run reports: training curves, evaluation scores, ablation grid.

Everything renders off-screen (Agg) to PNG files next to the JSON/TSV
outputs they illustrate.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METRIC_KEYS = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l")
METRIC_LABELS = {"bleu1": "BLEU-1", "bleu2": "BLEU-2", "bleu3": "BLEU-3", "bleu4": "BLEU-4",
                 "rouge_l": "ROUGE-L"}


def _figure(width: float = 6.4, height: Optional[float] = None):
    height = height or width * 0.62
    fig, ax = plt.subplots(figsize=(width, height), dpi=100)
    ax.grid(True, alpha=0.3, linewidth=0.6)
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)
    return fig, ax


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_log(records: Sequence[dict], path: str | Path, title: str = "") -> Path:
    """Step losses on the left axis, dev metrics (eval events) on the right."""
    fig, ax = _figure()
    steps = [r for r in records if "event" not in r]
    for key in ("loss_mmlp", "loss_align", "loss_dm", "loss_slt"):
        pts = [(r["step"], r[key]) for r in steps if key in r]
        if pts and any(v for _, v in pts):
            xs, ys = zip(*pts)
            ax.plot(xs, ys, label=key, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    evals = [r for r in records if r.get("event") == "eval"]
    dev_key = next((k for k in ("bleu4_dev", "retrieval_dev") if any(k in r for r in evals)), None)
    if dev_key:
        ax2 = ax.twinx()
        pts = [(r["step"], r[dev_key]) for r in evals if dev_key in r]
        ax2.plot(*zip(*pts), "o--", color="black", markersize=3, linewidth=1, label=dev_key)
        ax2.set_ylabel(dev_key)
        ax2.legend(loc="upper right", frameon=False, fontsize=8)
    if ax.lines:
        ax.legend(loc="upper left" if dev_key else "best", frameon=False, fontsize=8)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_scores(scores: dict, path: str | Path, title: str = "") -> Path:
    """Bar chart of BLEU-1..4 and ROUGE-L for one evaluation."""
    fig, ax = _figure(5.0)
    keys = [k for k in METRIC_KEYS if k in scores]
    vals = [scores[k] for k in keys]
    bars = ax.bar([METRIC_LABELS[k] for k in keys], vals, color="#4c72b0")
    for b, v in zip(bars, vals):
        ax.annotate(f"{v:.1f}", (b.get_x() + b.get_width() / 2, v), ha="center", va="bottom", fontsize=8)
    ax.set_ylim(0, 100)
    ax.set_ylabel("score")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path: str | Path, title: str = "") -> Path:
    """Grouped bars: one group per ablation row, one bar per metric."""
    fig, ax = _figure(8.0, 4.2)
    keys = [k for k in METRIC_KEYS if rows and k in rows[0]]
    width = 0.8 / max(len(keys), 1)
    for j, k in enumerate(keys):
        xs = [i + (j - (len(keys) - 1) / 2) * width for i in range(len(rows))]
        ax.bar(xs, [r[k] for r in rows], width, label=METRIC_LABELS[k])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([f"({r['row']}) {r['label']}" for r in rows], rotation=15, ha="right", fontsize=8)
    ax.set_ylim(0, 100)
    ax.set_ylabel("score")
    ax.legend(frameon=False, fontsize=8, ncol=len(keys))
    if title:
        ax.set_title(title)
    return _save(fig, path)
