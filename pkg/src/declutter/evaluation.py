"""Masked image metrics and the held-out evaluation report.

Irregular occlusion masks make direct windowed comparison meaningless, so
valid pixels are repacked in scanline order into the most-square rectangle
(surplus cells repeat the final pixel) and the same packing is applied to
prediction and ground truth before SSIM.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import PosedImageSet
from .training import TrainConfig, render_view

PSNR_CAP_DB = 99.0


def psnr_masked(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """PSNR in dB over valid (mask == 0) pixels; exact matches report the
    99 dB sentinel."""
    valid = np.asarray(mask) == 0
    if not np.any(valid):
        raise ValueError("all pixels are masked")
    diff = np.asarray(pred, dtype=np.float64)[valid] - np.asarray(gt, dtype=np.float64)[valid]
    mse = float(np.mean(diff**2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def most_square_shape(count: int) -> tuple[int, int]:
    if count < 1:
        raise ValueError("need at least one pixel")
    h = math.ceil(math.sqrt(count))
    w = math.ceil(count / h)
    return h, w


def rearrange_valid(pixels: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Pack pixels row-major into the most-square rectangle of area >= count,
    repeating the final pixel into any surplus cells."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    if pixels.shape[0] == 0:
        raise ValueError("no pixels to rearrange")
    h, w = shape if shape is not None else most_square_shape(pixels.shape[0])
    if h * w < pixels.shape[0]:
        raise ValueError(f"target rectangle {h}x{w} too small for {pixels.shape[0]} pixels")
    fill = h * w - pixels.shape[0]
    if fill:
        pixels = np.concatenate([pixels, np.repeat(pixels[-1:], fill, axis=0)], axis=0)
    return pixels.reshape(h, w, 3)


def uniform_window_ssim(
    a: np.ndarray, b: np.ndarray, window: int = 7, c1: float = 0.01**2, c2: float = 0.03**2
) -> float:
    """SSIM with a uniform (Gaussian-free) window at stride 1 over all
    complete windows, averaged across channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    if min(a.shape[0], a.shape[1]) < window:
        raise ValueError(f"image {a.shape[:2]} smaller than window {window}")

    def windows(x):
        view = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(0, 1))
        return view.reshape(*view.shape[:3], -1)  # (H', W', C, window^2)

    wa, wb = windows(a), windows(b)
    mu_a = wa.mean(axis=-1)
    mu_b = wb.mean(axis=-1)
    var_a = (wa * wa).mean(axis=-1) - mu_a**2
    var_b = (wb * wb).mean(axis=-1) - mu_b**2
    cov = (wa * wb).mean(axis=-1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def ssim_masked(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray, window: int = 7) -> float:
    """SSIM between rearranged valid pixels of prediction and ground truth."""
    valid = np.asarray(mask) == 0
    if not np.any(valid):
        raise ValueError("all pixels are masked")
    shape = most_square_shape(int(valid.sum()))
    packed_pred = rearrange_valid(np.asarray(pred)[valid], shape)
    packed_gt = rearrange_valid(np.asarray(gt)[valid], shape)
    return uniform_window_ssim(packed_pred, packed_gt, window)


@dataclass
class EvalRow:
    view: int
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    mean_psnr: float
    mean_ssim: float

    def to_text(self) -> str:
        lines = [f"{'view':>6} {'psnr_db':>10} {'ssim':>8}"]
        for row in self.rows:
            lines.append(f"{row.view:>6d} {row.psnr:>10.3f} {row.ssim:>8.4f}")
        lines.append(f"{'mean':>6} {self.mean_psnr:>10.3f} {self.mean_ssim:>8.4f}")
        return "\n".join(lines)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["view", "psnr_db", "ssim"])
            for row in self.rows:
                writer.writerow([row.view, repr(row.psnr), repr(row.ssim)])
            writer.writerow(["mean", repr(self.mean_psnr), repr(self.mean_ssim)])


def eval_report(
    field,
    dataset: PosedImageSet,
    config: TrainConfig,
    views: list[int] | None = None,
    renders_out: dict[int, np.ndarray] | None = None,
) -> EvalReport:
    """PSNR/SSIM over held-out views plus their arithmetic means.

    `renders_out`, when given, collects the rendered images for report
    figures.
    """
    views = views if views is not None else dataset.holdout_indices
    if not views:
        raise ValueError("dataset has no holdout views to evaluate")
    rows = []
    for view in views:
        image = render_view(
            field,
            dataset.poses[view],
            dataset.intrinsics,
            (dataset.width, dataset.height),
            dataset.near,
            dataset.far,
            config.samples_per_ray,
            config.white_background,
            chunk=config.render_chunk,
        )
        if renders_out is not None:
            renders_out[view] = image
        gt = np.asarray(dataset.images[view])
        mask = np.asarray(dataset.masks[view])
        rows.append(
            EvalRow(
                view=view,
                psnr=psnr_masked(image, gt, mask),
                ssim=ssim_masked(image, gt, mask),
            )
        )
    return EvalReport(
        rows=rows,
        mean_psnr=float(np.mean([r.psnr for r in rows])),
        mean_ssim=float(np.mean([r.ssim for r in rows])),
    )
