"""Matplotlib figures written straight to files (no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def learning_curve(records: Sequence[Mapping], path, title: str = "") -> Path:
    """Training loss per step and any dev scores, from metrics records."""
    fig, (ax_loss, ax_dev) = plt.subplots(1, 2, figsize=(10, 3.5))
    train = [r for r in records if r.get("split") == "train"]
    for task in sorted({r["task"] for r in train}):
        pts = [(r["step"], r["loss"]) for r in train if r["task"] == task]
        ax_loss.plot(*zip(*pts), label=task, lw=0.8)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("training loss")
    dev = [r for r in records if r.get("split") == "dev"]
    for task in sorted({r["task"] for r in dev}):
        rows = [r for r in dev if r["task"] == task]
        for key in ("uas", "las", "acc", "f1"):
            pts = [(r["step"], r[key]) for r in rows if r.get(key) is not None]
            if pts:
                ax_dev.plot(*zip(*pts), marker="o", label=f"{task} {key}")
    ax_dev.set_xlabel("step")
    ax_dev.set_ylabel("dev score")
    for ax in (ax_loss, ax_dev):
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=8)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def trend(curves: Mapping[str, Sequence[tuple[int, float]]], path, metric: str,
          title: str = "") -> Path:
    """One held-out curve per model, for comparing architectures."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for name, pts in curves.items():
        ax.plot(*zip(*pts), marker="o", label=name)
    ax.set_xlabel("step")
    ax.set_ylabel(f"dev {metric}")
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    return _save(fig, path)
