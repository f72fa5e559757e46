"""Report figures. Everything renders off-screen to files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curve(losses: list[dict], path, keys=("loss", "recon"), smooth: int = 20) -> Path:
    """Per-step training metrics with a trailing moving average."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for k in keys:
            y = np.array([row[k] for row in losses if k in row], dtype=float)
            if y.size == 0:
                continue
            ax.plot(y, alpha=0.25, lw=0.8)
            w = max(1, min(smooth, y.size))
            ma = np.convolve(y, np.ones(w) / w, mode="valid")
            ax.plot(np.arange(w - 1, y.size), ma, lw=1.5, label=k, color=ax.lines[-1].get_color())
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        return _save(fig, path)


def plot_probe_history(history, path, title: str = "") -> Path:
    """``history`` rows are ``(epoch, train_acc, test_acc)``."""
    h = np.asarray(history, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(h[:, 0] + 1, h[:, 1], label="train")
        ax.plot(h[:, 0] + 1, h[:, 2], label="test")
        ax.set_xlabel("epoch")
        ax.set_ylabel("top-1 accuracy")
        ax.set_ylim(0, 1)
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_image_grid(images: torch.Tensor, path, ncol: int = 8) -> Path:
    """Images ``[B, 3, H, W]`` in [-1, 1] tiled into one figure."""
    imgs = ((images.detach().clamp(-1, 1) + 1) / 2).permute(0, 2, 3, 1).numpy()
    n = imgs.shape[0]
    ncol = min(ncol, n)
    nrow = -(-n // ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(ncol * 0.9, nrow * 0.9), squeeze=False)
    for i, ax in enumerate(axes.flat):
        ax.axis("off")
        if i < n:
            ax.imshow(imgs[i], interpolation="nearest")
    fig.subplots_adjust(wspace=0.05, hspace=0.05)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(rows: list[dict], path, metric: str = "probe_acc") -> Path:
    """Bar chart of one metric across the values of a single sweep key."""
    labels = [str(r["value"]) for r in rows]
    vals = [float(r[metric]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3, 0.8 * len(rows) + 1.5), 3))
        ax.bar(range(len(rows)), vals, color="0.35", width=0.6)
        ax.set_xticks(range(len(rows)), labels)
        ax.set_xlabel(rows[0]["sweep_key"] if rows else "")
        ax.set_ylabel(metric)
        for i, v in enumerate(vals):
            ax.annotate(f"{v:.3f}", (i, v), ha="center", va="bottom", fontsize=7)
        return _save(fig, path)


def plot_layer_probe(accs: list[float], path) -> Path:
    """Probe accuracy per encoder block."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(range(1, len(accs) + 1), accs, marker="o")
        ax.set_xlabel("encoder block")
        ax.set_ylabel("probe accuracy")
        return _save(fig, path)
