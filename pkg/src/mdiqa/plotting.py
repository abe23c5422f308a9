"""Report figures rendered to PNG files next to the CSV/JSON outputs."""
from __future__ import annotations

from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-stable
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return str(path)


def plot_loss_curve(history: Sequence[float], path, title="training loss") -> str:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(range(1, len(history) + 1), list(history), lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    return _save(fig, path)


def plot_report(report: dict, path) -> str:
    """Bar chart of mean SRCC/PLCC per dimension plus overall."""
    names = ["overall"] + list(report["names"])
    mean = report["mean"]
    rows = [mean["overall"]] + [mean["dims"][n] for n in report["names"]]
    s = [r["srcc"] if r["srcc"] is not None else 0.0 for r in rows]
    p = [r["plcc"] if r["plcc"] is not None else 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, 0.7 * len(names)), 3.2))
    xs = range(len(names))
    ax.bar([x - 0.2 for x in xs], s, width=0.4, label="SRCC")
    ax.bar([x + 0.2 for x in xs], p, width=0.4, label="PLCC")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylim(min(0.0, min(s + p)), 1.0)
    ax.legend(loc="lower right")
    ax.set_title(f"mean over {len(report['splits'])} split(s)")
    return _save(fig, path)


def plot_sweep(rows: List[dict], path) -> str:
    """Critic score and both pixel proxies against the swept ratio."""
    dim = rows[0]["dim"]
    r = [row["ratio"] for row in rows]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, key in zip(axes, (f"critic_{dim}", "sharpness_proxy", "noisiness_proxy")):
        ax.plot(r, [row[key] for row in rows], marker="o")
        ax.set_xlabel(f"ratio on {dim}")
        ax.set_title(key)
    return _save(fig, path)


def plot_restore_log(log: List[dict], path) -> str:
    steps = [e for e in log if "loss" in e]
    vals = [e for e in log if "overall" in e]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3))
    axes[0].plot([e["step"] for e in steps], [e["loss"] for e in steps], lw=1)
    axes[0].set_title("restorer loss")
    axes[0].set_xlabel("step")
    if vals:
        axes[1].plot([e["step"] for e in vals], [e["overall"] for e in vals], marker="o")
    axes[1].set_title("critic overall on validation")
    axes[1].set_xlabel("step")
    return _save(fig, path)
