"""Delimited outputs and figures for training, attention inspection and ablations."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .model import AttentionTrace  # noqa: E402


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_rows(path: str | Path, rows: Sequence[dict], fields: Sequence[str] | None = None) -> Path:
    path = Path(path)
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return path


def trace_rows(trace: AttentionTrace) -> list[dict]:
    """Flatten renormalized attention rows: one line per (sample, layer, head, query, key span, key)."""
    out = []
    q0 = trace.query[0]
    for layer in range(trace.n_layers):
        for name, (k0, _) in trace.keys.items():
            rows = trace.rows(layer, name).numpy()
            B, H, Q, Kn = rows.shape
            for b in range(B):
                for h in range(H):
                    for q in range(Q):
                        for k in range(Kn):
                            out.append({
                                "sample": b, "layer": layer, "head": h, "query": q0 + q,
                                "span": name, "key": k0 + k, "weight": float(rows[b, h, q, k]),
                            })
    return out


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss(history: Sequence[dict], path: str | Path) -> Path:
    steps = [r["step"] for r in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for key in ("total", "ce", "distill"):
        ax.plot(steps, [r[key] for r in history], label=key, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_layer_curve(values: Sequence[float], path: str | Path, ylabel: str, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(np.arange(len(values)), values, marker="o", lw=1.2)
    ax.set_xlabel("layer")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=10)
    ax.set_xticks(np.arange(len(values)))
    return _save(fig, path)


def plot_ablation(summary: Sequence[dict], metrics: Sequence[str], path: str | Path) -> Path:
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3), squeeze=False)
    names = [r["variant"] for r in summary]
    x = np.arange(len(names))
    for ax, metric in zip(axes[0], metrics):
        mean = np.array([r[f"{metric}_mean"] for r in summary])
        lo = mean - np.array([r[f"{metric}_min"] for r in summary])
        hi = np.array([r[f"{metric}_max"] for r in summary]) - mean
        ax.bar(x, mean, yerr=[lo, hi], color="0.6", capsize=3)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_title(metric, fontsize=9)
    return _save(fig, path)
