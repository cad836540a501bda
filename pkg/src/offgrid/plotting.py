"""Matplotlib figures for fit reports. Everything renders to files (Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .losses import LOSS_NAMES  # noqa: E402


def plot_trace(trace: list, path) -> None:
    """Loss components (log scale) and PSNR against step."""
    if not trace:
        raise ValueError("empty trace")
    steps = np.array([r["step"] for r in trace])
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))
    for name in ("total",) + LOSS_NAMES:
        vals = np.array([r[name] for r in trace], dtype=np.float64)
        if np.all(vals <= 0):
            continue
        ax0.plot(steps, np.where(vals > 0, vals, np.nan), label=name, lw=2 if name == "total" else 1)
    ax0.set_yscale("log")
    ax0.set_xlabel("step")
    ax0.set_ylabel("loss")
    ax0.legend(fontsize=7)
    ax1.plot(steps, [r["psnr"] for r in trace], label="self render")
    ax1.plot(steps, [r["psnr_full"] for r in trace], label="full render")
    ax1.set_xlabel("step")
    ax1.set_ylabel("PSNR (dB)")
    ax1.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_mean_heatmaps(mean_maps: dict, path, max_channels: int = 16) -> None:
    """Grid of per-channel mean activations, one row per density level."""
    levels = sorted(mean_maps)
    if not levels:
        raise ValueError("no heatmaps")
    ncols = min(max_channels, max(mean_maps[lv].shape[0] for lv in levels))
    fig, axes = plt.subplots(len(levels), ncols, figsize=(ncols * 0.9, len(levels) * 1.0), squeeze=False)
    for r, lv in enumerate(levels):
        maps = mean_maps[lv]
        for c in range(ncols):
            ax = axes[r, c]
            ax.set_xticks([])
            ax.set_yticks([])
            if c < maps.shape[0]:
                ax.imshow(maps[c], cmap="viridis")
            else:
                ax.axis("off")
        axes[r, 0].set_ylabel(str(lv), rotation=0, labelpad=12)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_render_comparison(image: np.ndarray, rendered: np.ndarray, path, detections=None) -> None:
    """Input, render and absolute error side by side, optionally with detections overlaid."""
    err = np.abs(np.asarray(rendered) - image).mean(axis=-1)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.6))
    for ax, im, title in zip(axes, (image, np.clip(rendered, 0, 1), err), ("input", "render", "|error|")):
        ax.imshow(im, cmap="magma" if im.ndim == 2 else None, extent=(0, image.shape[1], image.shape[0], 0))
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    if detections is not None and len(detections):
        axes[1].scatter(detections[:, 0], detections[:, 1], s=1, c="cyan")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
