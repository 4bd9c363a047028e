"""Figures and delimited tables written next to command outputs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "axes.linewidth": 0.8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def _figure(width: float = 4.5, aspect: float = 0.62):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, width * aspect))
    return fig, ax


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        # no Software tag keeps PNG bytes reproducible
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(row)
    return path


def plot_loss_curve(records: Sequence[dict], path: str | Path, window: int = 25) -> Path:
    it = np.array([r["iter"] for r in records])
    loss = np.array([r["loss"] for r in records])
    fig, ax = _figure()
    ax.plot(it, loss, lw=0.6, color="0.7", label="per step")
    if len(loss) >= window:
        smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
        ax.plot(it[window - 1:], smooth, lw=1.4, color="C0", label=f"mean of {window}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("training loss")
    ax.legend(frameon=False)
    return _save(fig, Path(path))


def plot_confusion(cm: np.ndarray, names: Sequence[str], path: str | Path) -> Path:
    fig, ax = _figure(3.6, 0.9)
    ax.imshow(cm, cmap="Blues")
    ticks = np.arange(len(names))
    ax.set_xticks(ticks, names, rotation=35, ha="right")
    ax.set_yticks(ticks, names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    hi = cm.max() if cm.size else 0
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                    color="white" if cm[i, j] > hi / 2 else "black", fontsize=8)
    return _save(fig, Path(path))


def plot_per_class_ap(ap: np.ndarray, names: Sequence[str], path: str | Path) -> Path:
    fig, ax = _figure()
    vals = np.nan_to_num(ap, nan=0.0)
    ax.bar(np.arange(len(vals)), vals, color="C0")
    ax.set_xticks(np.arange(len(vals)), names, rotation=35, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("average precision")
    return _save(fig, Path(path))


def plot_adjacency(mats: dict[str, np.ndarray], path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(mats), figsize=(3.0 * len(mats), 3.0))
    for ax, (kind, m) in zip(np.atleast_1d(axes), mats.items()):
        ax.imshow(m, cmap="viridis", interpolation="nearest")
        ax.set_title(kind)
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, Path(path))


def plot_ablation(accuracies: dict[str, float], path: str | Path) -> Path:
    fig, ax = _figure()
    names = list(accuracies)
    ax.bar(np.arange(len(names)), [accuracies[n] for n in names], color=["0.6", "C1", "C2", "C0"][: len(names)])
    ax.set_xticks(np.arange(len(names)), names)
    ax.set_ylim(0, 1)
    ax.set_ylabel("test accuracy")
    return _save(fig, Path(path))
