"""Matplotlib renderings that accompany the delimited reports."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def render_bench_figures(rows: list[dict], out_dir) -> list[str]:
    """Write loss and interference bar charts for a benchmark report."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [
        _loss_figure(rows, os.path.join(out_dir, "losses.png")),
        _interference_figure(rows, os.path.join(out_dir, "interference.png")),
    ]
    return paths


def _loss_figure(rows, path):
    methods = list(dict.fromkeys(r["method"] for r in rows))
    tasks = list(dict.fromkeys(r["task_id"] for r in rows))
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(6.4, 3.6), dpi=120)
    xs = list(range(len(tasks)))
    for mi, method in enumerate(methods):
        vals = [next(r["loss_merged"] for r in rows
                     if r["method"] == method and r["task_id"] == t) for t in tasks]
        ax.bar([x + mi * width for x in xs], vals, width=width, label=method)
    ft = [next(r["loss_finetuned"] for r in rows if r["task_id"] == t) for t in tasks]
    for x, v in zip(xs, ft):
        ax.hlines(v, x - 0.1, x + 0.8, colors="black", linestyles="dotted",
                  label="fine-tuned" if x == 0 else None)
    ax.set_xticks([x + 0.4 - width / 2 for x in xs])
    ax.set_xticklabels(tasks)
    ax.set_ylabel("MSE on task data")
    ax.set_title("Merged-model loss per task")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _interference_figure(rows, path):
    methods = list(dict.fromkeys(r["method"] for r in rows))
    dev = [next(r["deviation_fraction"] for r in rows if r["method"] == m)
           for m in methods]
    conf = [next(r["sign_conflict_fraction"] for r in rows if r["method"] == m)
            for m in methods]
    xs = list(range(len(methods)))
    fig, ax = plt.subplots(figsize=(6.4, 3.6), dpi=120)
    ax.bar([x - 0.18 for x in xs], dev, width=0.36, label="deviation fraction")
    ax.bar([x + 0.18 for x in xs], conf, width=0.36, label="sign-conflict fraction")
    ax.set_xticks(xs)
    ax.set_xticklabels(methods)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("fraction of coordinates")
    ax.set_title("Interference statistics per method")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_interference_figure(stats, nonzero_counts: list[int], total: int,
                               path) -> str:
    """Single-merge audit figure: fractions plus per-model nonzero shares."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.6, 3.2), dpi=120)
    ax1.bar(["deviation", "sign conflict"],
            [stats.deviation_fraction, stats.sign_conflict_fraction],
            color=["tab:red", "tab:orange"])
    ax1.set_ylim(0, 1.05)
    ax1.set_title("merged-delta interference")
    shares = [c / total for c in nonzero_counts]
    ax2.bar([f"model {i}" for i in range(len(shares))], shares, color="tab:blue")
    ax2.set_ylim(0, 1.05)
    ax2.set_title("nonzero delta share per model")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
