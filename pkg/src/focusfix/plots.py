"""Figure rendering for the report path (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch


def _to_img(x: torch.Tensor) -> np.ndarray:
    arr = x.detach().numpy()
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
        return np.clip((arr + 1.0) / 2.0, 0.0, 1.0)
    return arr


def triptych_grid(refs, gens, masks, path: str | Path, max_rows: int = 16) -> Path:
    """Rows of (reference, fine-tuned, mask) images."""
    n = min(len(refs), max_rows)
    fig, axes = plt.subplots(n, 3, figsize=(4.8, 1.6 * n), squeeze=False)
    for i in range(n):
        for j, (img, title) in enumerate(
            [(refs[i], "reference"), (gens[i], "fine-tuned"), (masks[i], "mask")]
        ):
            ax = axes[i][j]
            if j == 2:
                ax.imshow(_to_img(img), cmap="gray", vmin=0, vmax=1)
            else:
                ax.imshow(_to_img(img))
            if i == 0:
                ax.set_title(title, fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def tradeoff_figure(rows, path: str | Path) -> Path:
    """Reward gain vs PSNR/SSIM/perceptual distance across the beta sweep."""
    ok = [r for r in rows if not r.error]
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.2))
    panels = [("psnr", "PSNR (dB)"), ("ssim", "SSIM"), ("pdist", "perceptual distance")]
    for ax, (attr, label) in zip(axes, panels):
        xs = [r.reward_gain for r in ok]
        ys = [getattr(r, attr) for r in ok]
        ax.plot(xs, ys, "o-", color="tab:blue")
        for r in ok:
            ax.annotate(
                f"β={r.beta:g}",
                (r.reward_gain, getattr(r, attr)),
                textcoords="offset points",
                xytext=(4, 4),
                fontsize=7,
            )
        ax.set_xlabel("reward gain")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return path


def loss_curve(losses, path: str | Path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.plot(losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title, fontsize=9)
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_curves(rows: list[dict], path: str | Path) -> Path:
    """Step log panels: objective, reward, penalty, mask area."""
    fig, axes = plt.subplots(2, 2, figsize=(9, 5.5))
    keys = [("J", "objective J"), ("r", "reward"), ("penalty", "regional penalty"), ("mask_area", "mask area fraction")]
    steps = [r["step"] for r in rows]
    for ax, (key, label) in zip(axes.flat, keys):
        ax.plot(steps, [r[key] for r in rows], lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
