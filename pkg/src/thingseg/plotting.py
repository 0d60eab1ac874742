"""Report figures: row-normalized confusion heatmaps and loss curves.

Figures are built on ``matplotlib.figure.Figure`` with the Agg canvas, so no
display or global pyplot state is involved.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .evaluation import EvalReport, row_normalized


def confusion_figure(report: EvalReport, level: str = "class") -> Figure:
    names = report.taxonomy.group_names(level)
    pct = row_normalized(report.matrix(level))
    size = 1.6 + 0.55 * len(names)
    fig = Figure(figsize=(size + 1.0, size))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    im = ax.imshow(pct, vmin=0.0, vmax=100.0, cmap="Blues")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, f"{pct[i, j]:.1f}", ha="center", va="center", fontsize=7,
                    color="white" if pct[i, j] > 60 else "black")
    fig.colorbar(im, ax=ax, label="% of row")
    ax.set_title(f"confusion ({level})")
    fig.tight_layout()
    return fig


def save_confusion_figure(report: EvalReport, level: str, path) -> Path:
    path = Path(path)
    confusion_figure(report, level).savefig(path, dpi=100, metadata={"Software": None})
    return path


def loss_curve_figure(log: list) -> Figure:
    """One line per loss component over epochs."""
    fig = Figure(figsize=(6, 4))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    epochs = np.array([e["epoch"] for e in log])
    for key in ("clean", "aug", "fb", "bfd", "total"):
        ax.plot(epochs, [e[key] for e in log], marker="o", label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend()
    fig.tight_layout()
    return fig


def save_loss_curve(log: list, path) -> Path:
    path = Path(path)
    loss_curve_figure(log).savefig(path, dpi=100, metadata={"Software": None})
    return path
