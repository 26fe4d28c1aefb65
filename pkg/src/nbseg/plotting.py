"""Figures written next to the delimited CLI outputs."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .masks import ternary_to_rgb  # noqa: E402


def loss_curves(history, path, title="loss") -> None:
    epochs = [r.epoch for r in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r.train_loss for r in history], label="train")
    val = [r.val_loss for r in history]
    if not all(math.isnan(v) for v in val):
        ax.plot(epochs, val, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("weighted cross-entropy")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def error_rates(rows: dict, path) -> None:
    """Grouped bars of the four error rates per image."""
    keys = ("mdr", "fdr", "usr", "osr")
    names = list(rows)
    x = np.arange(len(names))
    width = 0.2
    fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(names) + 2), 4))
    for i, k in enumerate(keys):
        ax.bar(x + (i - 1.5) * width, [rows[n][k] for n in names], width, label=k.upper())
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("rate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def augment_grid(pairs, path) -> None:
    """Rows of (image, ternary mask); the first row is the original."""
    n = len(pairs)
    fig, axes = plt.subplots(2, n, figsize=(2.2 * n, 4.4), squeeze=False)
    for j, (img, tgt) in enumerate(pairs):
        axes[0, j].imshow(np.clip(img, 0, 1))
        axes[1, j].imshow(ternary_to_rgb(tgt))
        axes[0, j].set_title("original" if j == 0 else f"draw {j}", fontsize=9)
        for ax in axes[:, j]:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
