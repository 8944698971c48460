"""Figure emission (files only, no interactive sessions)."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_training_log(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise ValueError(f"no records in training log {path}")
    return records


def plot_training_curves(history, out_path) -> Path:
    """Loss components over steps from a history list or JSONL log path."""
    if isinstance(history, (str, Path)):
        history = read_training_log(history)
    steps = [r["step"] for r in history]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(steps, [r["loss"] for r in history], label="total", lw=1.2)
    for key, label in (("l_p", "parameter"), ("l_s", "sensitivity"), ("l_d", "dropout")):
        if key in history[0]:
            ax.plot(steps, [r[key] for r in history], label=label, lw=0.9, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=140)
    plt.close(fig)
    return out_path


def plot_error_vs_condition(x_values, reports, out_path, metric: str = "error_rot_deg", x_label: str = "condition"):
    """One curve of an aggregate metric against a swept condition.

    ``reports`` holds metrics dicts (as written to metrics.json) in the same
    order as ``x_values``.
    """
    if len(x_values) != len(reports):
        raise ValueError("x_values and reports must align")
    ys = []
    for rep in reports:
        if metric not in rep:
            raise KeyError(f"metric {metric!r} not in report (have {sorted(rep)})")
        ys.append(rep[metric])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(x_values, ys, marker="o")
    ax.set_xlabel(x_label)
    ax.set_ylabel(metric)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=140)
    plt.close(fig)
    return out_path


def plot_saliency_overlay(source, reference, result, out_path):
    """Clouds plus the per-iteration saliency points of each side."""
    fig = plt.figure(figsize=(7, 6))
    ax = fig.add_subplot(111, projection="3d")
    src = np.asarray(source)
    ref = np.asarray(reference)
    ax.scatter(*src.T, s=2, alpha=0.35, label="source", color="tab:blue")
    ax.scatter(*ref.T, s=2, alpha=0.35, label="reference", color="tab:orange")
    for i, (cx, cy) in enumerate(zip(result.saliency_source, result.saliency_reference), start=1):
        if cx is None or cy is None:
            continue
        ax.scatter(*np.atleast_2d(cx).T, s=60, marker="^", color="tab:blue", edgecolor="k")
        ax.scatter(*np.atleast_2d(cy).T, s=60, marker="^", color="tab:orange", edgecolor="k")
        ax.text(*cx, f"{i}", color="tab:blue")
        ax.text(*cy, f"{i}", color="tab:orange")
    ax.legend(loc="upper right")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=140)
    plt.close(fig)
    return out_path


def plot_contribution_hist(counts: np.ndarray, out_path, title: str = "per-point feature contributions"):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(np.arange(len(counts)), counts, width=1.0)
    ax.set_xlabel("point index")
    ax.set_ylabel("channels won")
    ax.set_title(title)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=140)
    plt.close(fig)
    return out_path
