"""Render run reports to PNG files.  Import cost is paid only when used."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def latency_curves(reports, path):
    """Per-iteration total latency, one line per policy."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for report in reports:
        ys = np.asarray(report.iteration_latencies()) * 1e3
        ax.plot(np.arange(len(ys)), ys, marker="o", markersize=3, label=report.label())
    ax.set_xlabel("iteration")
    ax.set_ylabel("iteration latency (ms)")
    ax.set_title("iteration latency by policy")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def breakdown_bars(reports, path):
    """Stacked time breakdown summed over the whole run, one bar per policy."""
    keys = [
        "attention",
        "all_to_all",
        "expert_compute",
        "exposed_gather",
        "exposed_reduce",
        "calibration",
        "rearrange",
        "reshard",
    ]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    labels = [r.label() for r in reports]
    xs = np.arange(len(reports))
    bottom = np.zeros(len(reports))
    for key in keys:
        vals = np.array([r.breakdown()[key] for r in reports]) * 1e3
        if vals.any():
            ax.bar(xs, vals, bottom=bottom, label=key, width=0.6)
        bottom += vals
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("total time (ms)")
    ax.set_title("where the time goes")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def memory_bars(reports, path):
    """Peak per-device memory by category, grouped per policy."""
    cats = ["param_bytes", "grad_bytes", "optimizer_bytes", "materialized_bytes"]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    width = 0.8 / len(cats)
    xs = np.arange(len(reports))
    for i, cat in enumerate(cats):
        vals = np.array([r.memory_peaks()[cat] for r in reports]) / 2**20
        ax.bar(xs + i * width, vals, width=width, label=cat.replace("_bytes", ""))
    ax.set_xticks(xs + width * (len(cats) - 1) / 2)
    ax.set_xticklabels([r.label() for r in reports], rotation=20, ha="right")
    ax.set_ylabel("peak per-device MiB")
    ax.set_title("peak memory by category")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def interval_curve(intervals, totals, path, ylabel="total latency (ms)"):
    """Total run latency as a function of a policy's rearrangement interval."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(intervals, np.asarray(totals) * 1e3, marker="s")
    ax.set_xlabel("rearrangement interval (iterations)")
    ax.set_ylabel(ylabel)
    ax.set_title("interval sweep")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
