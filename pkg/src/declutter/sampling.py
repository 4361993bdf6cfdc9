"""Uniform-per-view valid-pixel ray sampling and long-tail visibility analytics.

Pixel visibility (the number of views in which a pixel's scene point is
observable) follows a long-tailed pattern in occluded scenes, modeled as
P(x) proportional to 1 / (x_max - x + 1)^alpha. Grouping rays into patches
averages member visibilities, which provably shortens the tail: a patch's
visibility is bounded by its members' extremes and, for i.i.d. members, has
1/K^2 of the pixel variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import PosedImageSet


class PixelSampler:
    """Draws valid (mask == 0) pixels uniformly per training view.

    Each batch takes floor(B / V) pixels from every view without replacement
    (with replacement only when a view has fewer valid pixels than requested);
    the remainder B - bV goes round-robin to the first views in index order.
    """

    def __init__(self, dataset: PosedImageSet, generator: torch.Generator | None = None):
        self.views = dataset.train_indices
        self.width = dataset.width
        self.generator = generator if generator is not None else torch.Generator()
        self._valid: dict[int, torch.Tensor] = {}
        for v in self.views:
            flat = np.flatnonzero(np.asarray(dataset.masks[v]) == 0)
            if flat.size == 0:
                raise ValueError(f"view {v} has no valid pixels to sample")
            self._valid[v] = torch.from_numpy(flat.astype(np.int64))

    def sample(self, batch_size: int) -> tuple[torch.Tensor, torch.Tensor]:
        num_views = len(self.views)
        if batch_size < num_views:
            raise ValueError(f"batch size {batch_size} below view count {num_views}")
        base = batch_size // num_views
        remainder = batch_size - base * num_views
        view_chunks, pixel_chunks = [], []
        for pos, v in enumerate(self.views):
            count = base + (1 if pos < remainder else 0)
            pool = self._valid[v]
            if count <= pool.shape[0]:
                picked = pool[torch.randperm(pool.shape[0], generator=self.generator)[:count]]
            else:
                picked = pool[
                    torch.randint(pool.shape[0], (count,), generator=self.generator)
                ]
            view_chunks.append(torch.full((count,), v, dtype=torch.int64))
            pixel_chunks.append(picked)
        views = torch.cat(view_chunks)
        flat = torch.cat(pixel_chunks)
        xy = torch.stack([flat % self.width, flat // self.width], dim=-1)
        return views, xy


def sample_batch(
    dataset: PosedImageSet, batch_size: int, seed: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """One-shot seeded batch of (view_index, pixel_xy) pairs."""
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return PixelSampler(dataset, gen).sample(batch_size)


@dataclass
class VisibilityHistogram:
    counts: dict[int, float]
    x_max: int
    fitted_alpha: float | None = None

    def __post_init__(self):
        if not self.counts:
            raise ValueError("histogram is empty")
        if any(c < 0 for c in self.counts.values()):
            raise ValueError("histogram counts must be nonnegative")
        if sum(self.counts.values()) <= 0:
            raise ValueError("histogram total must be positive")

    @classmethod
    def from_values(cls, values) -> "VisibilityHistogram":
        arr = np.asarray(values).astype(np.int64).ravel()
        uniq, counts = np.unique(arr, return_counts=True)
        return cls(
            counts={int(x): float(c) for x, c in zip(uniq, counts)},
            x_max=int(uniq.max()),
        )


def longtail_probabilities(alpha: float, x_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Support 1..x_max and normalized probabilities of the long-tail model
    P(x) proportional to 1 / (x_max - x + 1)^alpha."""
    values = np.arange(1, x_max + 1)
    weights = 1.0 / (x_max - values + 1.0) ** alpha
    return values, weights / weights.sum()


def fit_longtail(hist: VisibilityHistogram) -> float:
    """Least-squares exponent fit of log P(x) against -alpha log(x_max - x + 1).

    Requires at least 3 distinct populated visibility values; all-mass-at-one
    histograms are degenerate.
    """
    items = sorted((x, c) for x, c in hist.counts.items() if c > 0)
    if len(items) < 3:
        raise ValueError(f"degenerate histogram: {len(items)} populated bins, need >= 3")
    xs = np.array([x for x, _ in items], dtype=np.float64)
    cs = np.array([c for _, c in items], dtype=np.float64)
    p = cs / cs.sum()
    u = np.log(hist.x_max - xs + 1.0)
    slope, _ = np.polyfit(u, np.log(p), 1)
    alpha = float(-slope)
    hist.fitted_alpha = alpha
    return alpha


def patch_visibility(vis_values) -> float:
    """Arithmetic mean of the member pixel visibilities."""
    arr = np.asarray(vis_values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("empty patch")
    return float(arr.mean())


@dataclass
class PatchStats:
    patch_side: int
    num_patches: int
    mean: float
    variance: float
    vmin: float
    vmax: float
    pixel_variance: float
    variance_ratio: float
    histogram_edges: np.ndarray = field(repr=False)
    histogram_counts: np.ndarray = field(repr=False)


def patch_distribution(
    pixel_vis,
    patch_side: int,
    patch_count: int,
    trials: int,
    seed: int,
    with_replacement: bool = False,
) -> PatchStats:
    """Distribution of patch visibilities over seeded random regroupings.

    Each trial groups pixels into `patch_count` patches of patch_side^2
    members, without replacement by default (what the patch loss actually
    does) or i.i.d. with replacement for variance-law checks. Every sampled
    patch is asserted to respect the min/max member bounds.
    """
    arr = np.asarray(pixel_vis, dtype=np.float64).ravel()
    area = patch_side**2
    need = patch_count * area
    if arr.size < area:
        raise ValueError(f"need at least {area} pixels, got {arr.size}")
    if not with_replacement and arr.size < need:
        raise ValueError(
            f"{need} samples per trial exceed population {arr.size}; "
            "use with_replacement or fewer patches"
        )
    rng = np.random.default_rng(seed)
    values = np.empty(trials * patch_count, dtype=np.float64)
    for trial in range(trials):
        if with_replacement:
            idx = rng.integers(0, arr.size, size=need)
        else:
            idx = rng.permutation(arr.size)[:need]
        members = arr[idx].reshape(patch_count, area)
        vis = members.mean(axis=1)
        if np.any(vis < members.min(axis=1)) or np.any(vis > members.max(axis=1)):
            raise AssertionError("patch visibility escaped its member bounds")
        values[trial * patch_count : (trial + 1) * patch_count] = vis

    pixel_var = float(arr.var())
    patch_var = float(values.var())
    counts, edges = np.histogram(values, bins=32)
    return PatchStats(
        patch_side=patch_side,
        num_patches=values.size,
        mean=float(values.mean()),
        variance=patch_var,
        vmin=float(values.min()),
        vmax=float(values.max()),
        pixel_variance=pixel_var,
        variance_ratio=patch_var / pixel_var if pixel_var > 0 else float("nan"),
        histogram_edges=edges,
        histogram_counts=counts,
    )


def valid_view_count_map(dataset: PosedImageSet) -> np.ndarray:
    """Visibility proxy for real datasets without an oracle: per pixel
    coordinate, the number of training views whose mask is valid there.
    This ignores parallax and is only an approximation."""
    acc = np.zeros((dataset.height, dataset.width), dtype=np.int64)
    for v in dataset.train_indices:
        acc += np.asarray(dataset.masks[v]) == 0
    return np.maximum(acc, 1)
