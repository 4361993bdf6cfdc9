"""Matplotlib report figures saved alongside the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image


def save_image_png(image: np.ndarray, path) -> Path:
    """Write an [0, 1] float image as 8-bit PNG."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
    return path


def metrics_figure(metrics: list[dict], path) -> Path:
    """Loss terms and schedules over training iterations."""
    iters = [int(row["iter"]) for row in metrics]
    fig, (ax_loss, ax_sched) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for key in ("mse", "occ", "s3im"):
        values = [float(row[key]) for row in metrics]
        if any(v > 0 for v in values):
            ax_loss.plot(iters, values, label=key)
    ax_loss.set_yscale("log")
    ax_loss.set_ylabel("loss term")
    ax_loss.legend()
    ax_sched.plot(iters, [float(row["w_occ"]) for row in metrics], label="w_occ")
    ax_sched.plot(iters, [float(row["f_max"]) for row in metrics], label="f_max")
    ax_sched.set_xlabel("iteration")
    ax_sched.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def comparison_figure(gt: np.ndarray, pred: np.ndarray, mask: np.ndarray, path, title="") -> Path:
    """Ground truth, render, per-pixel error, and the validity mask."""
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
    panels = [
        (np.clip(gt, 0, 1), "ground truth"),
        (np.clip(pred, 0, 1), "render"),
        (np.abs(np.asarray(pred) - np.asarray(gt)).mean(axis=-1), "abs error"),
        (np.asarray(mask), "mask (1 = occluded)"),
    ]
    for ax, (img, name) in zip(axes, panels):
        if img.ndim == 2:
            im = ax.imshow(img, cmap="magma")
            fig.colorbar(im, ax=ax, fraction=0.046)
        else:
            ax.imshow(img)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def visibility_histogram_figure(hist, path) -> Path:
    """Pixel-visibility distribution with the fitted long-tail curve."""
    xs = np.array(sorted(hist.counts))
    counts = np.array([hist.counts[int(x)] for x in xs], dtype=np.float64)
    probs = counts / counts.sum()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(xs, probs, width=0.8, label="observed P(x)")
    if hist.fitted_alpha is not None:
        model = 1.0 / (hist.x_max - xs + 1.0) ** hist.fitted_alpha
        model = model / model.sum()
        ax.plot(xs, model, "r.-", label=f"fit, alpha={hist.fitted_alpha:.2f}")
    ax.set_xlabel("pixel visibility x (views)")
    ax.set_ylabel("P(x)")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def visibility_map_figure(vis_map: np.ndarray, path) -> Path:
    """Per-pixel visibility heatmap; darkness encodes -log of the normalized
    visibility, so rarely observed regions read as dark."""
    vis = np.asarray(vis_map, dtype=np.float64)
    darkness = -np.log(vis / vis.max())
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(darkness, cmap="gray_r")
    fig.colorbar(im, ax=ax, label="-log normalized visibility")
    ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def patch_variance_figure(stats_by_k: dict[int, object], path) -> Path:
    """Patch-visibility variance ratio against the 1/K^2 mixing law."""
    ks = sorted(stats_by_k)
    ratios = [stats_by_k[k].variance_ratio for k in ks]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(ks, ratios, "o-", label="measured Var(patch)/Var(pixel)")
    ax.plot(ks, [1.0 / k**2 for k in ks], "k--", label="1/K^2")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("patch side K")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def dataset_contact_sheet(dataset, path, max_views: int = 8) -> Path:
    """First few views with their occlusion masks."""
    views = list(range(min(dataset.num_views, max_views)))
    fig, axes = plt.subplots(2, len(views), figsize=(2.2 * len(views), 4.6), squeeze=False)
    for col, view in enumerate(views):
        axes[0][col].imshow(np.clip(dataset.images[view], 0, 1))
        tag = " (holdout)" if view in dataset.holdout_indices else ""
        axes[0][col].set_title(f"view {view}{tag}", fontsize=8)
        axes[1][col].imshow(np.asarray(dataset.masks[view]), cmap="gray", vmin=0, vmax=1)
        axes[0][col].axis("off")
        axes[1][col].axis("off")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def propagation_figure(dataset, result, path, max_views: int = 8) -> Path:
    """Propagated prompt locations drawn over the first few views."""
    views = list(range(min(dataset.num_views, max_views)))
    cols = min(4, len(views))
    rows = (len(views) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.6 * rows), squeeze=False)
    for slot, view in enumerate(views):
        ax = axes[slot // cols][slot % cols]
        ax.imshow(np.clip(dataset.images[view], 0, 1))
        for per_view in result.projections:
            if view in per_view:
                u, v = per_view[view]
                ax.plot(u, v, "r+", markersize=8)
        ax.set_title(f"view {view}", fontsize=9)
        ax.axis("off")
    for slot in range(len(views), rows * cols):
        axes[slot // cols][slot % cols].axis("off")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
