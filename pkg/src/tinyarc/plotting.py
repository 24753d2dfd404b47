"""Figures written next to reports and checkpoints."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

# conventional ARC palette, indexed by color id
ARC_COLORS = ["#000000", "#0074D9", "#FF4136", "#2ECC40", "#FFDC00",
              "#AAAAAA", "#F012BE", "#FF851B", "#7FDBFF", "#870C25"]

RC = {
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def plot_metrics(report, path: str | Path) -> Path:
    """Grouped bars of accuracy / valid / failed rates per strategy."""
    path = Path(path)
    names = [s.name for s in report.strategies]
    series = [
        ("accuracy", [float(s.accuracy) for s in report.strategies], "#2c7bb6"),
        ("valid", [float(s.valid_rate) for s in report.strategies], "#abd9e9"),
        ("failed", [float(s.failed_rate) for s in report.strategies], "#d7191c"),
    ]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.6 + 1.4 * max(1, len(names)), 3.2))
        width = 0.26
        for j, (label, vals, color) in enumerate(series):
            xs = [i + (j - 1) * width for i in range(len(names))]
            bars = ax.bar(xs, [100 * v for v in vals], width, label=label, color=color)
            ax.bar_label(bars, fmt="%.1f", fontsize=7, padding=1)
        ax.set_xticks(range(len(names)), names)
        ax.set_ylim(0, 110)
        ax.set_ylabel("% of test items")
        ax.legend(frameon=False, ncols=3, loc="upper center", fontsize=8)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_loss(steps: Sequence[int], losses: Sequence[float], path: str | Path, window: int = 50) -> Path:
    path = Path(path)
    smooth, acc = [], 0.0
    for i, l in enumerate(losses):
        acc += l
        if i >= window:
            acc -= losses[i - window]
        smooth.append(acc / min(i + 1, window))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(steps, losses, color="#bbbbbb", lw=0.6, label="batch")
        ax.plot(steps, smooth, color="#2c7bb6", lw=1.4, label=f"mean of {window}")
        ax.set_xlabel("step")
        ax.set_ylabel("masked cross-entropy")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_task(task, path: str | Path, predictions=None) -> Path:
    """Demonstrations and test items side by side, ARC palette."""
    path = Path(path)
    cols = []
    for p in task.train:
        cols.append((p.input, p.output, "train"))
    for i, it in enumerate(task.test):
        pred = None if predictions is None else predictions[i]
        cols.append((it.input, pred if pred is not None else it.output, "test"))
    cmap = ListedColormap(ARC_COLORS)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, len(cols), figsize=(1.6 * len(cols), 3.4), squeeze=False)
        for j, (gi, go, tag) in enumerate(cols):
            for r, g in enumerate((gi, go)):
                ax = axes[r][j]
                ax.set_xticks([])
                ax.set_yticks([])
                if g is not None:
                    ax.imshow(g.array, cmap=cmap, vmin=0, vmax=9, interpolation="nearest")
            axes[0][j].set_title(tag, fontsize=8)
        fig.savefig(path)
        plt.close(fig)
    return path
