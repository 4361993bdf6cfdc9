"""Radiance field: frequency-masked positional encoding, the MLP, and
differentiable volume rendering.

The encoding opens frequency bands linearly over early training. The default
band mask is hard (a band is either fully on or off); a smooth variant that
feathers the boundary band in proportionally is available behind a flag.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass
class EncodingConfig:
    l_pos: int = 10
    l_dir: int = 4
    include_identity: bool = True

    def __post_init__(self):
        if self.l_pos < 1 or self.l_dir < 0:
            raise ValueError("need l_pos >= 1 and l_dir >= 0")


@dataclass
class RenderConfig:
    samples_per_ray: int
    near: float
    far: float
    stratified: bool = True
    white_background: bool = False

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("need at least 2 samples per ray")
        if not self.near < self.far:
            raise ValueError("near must be below far")


def band_mask(num_bands: int, f_max: float, smooth: bool, dtype, device) -> torch.Tensor:
    """Per-band gate: band j is open once f_max exceeds j+1. The smooth
    variant weights the boundary band by the fractional part instead of
    holding it closed."""
    j = torch.arange(num_bands, dtype=dtype, device=device)
    if smooth:
        return torch.clamp(f_max - j, 0.0, 1.0)
    return (f_max - j >= 1.0).to(dtype)


def positional_encoding(
    p: torch.Tensor,
    num_bands: int,
    f_max: float | None = None,
    include_identity: bool = True,
    smooth: bool = False,
) -> torch.Tensor:
    """Sin/cos features (sin 2^j pi p, cos 2^j pi p) for j < num_bands, gated
    by the band mask at f_max. Inputs are expected in [-1, 1]. The raw input
    is prepended (unmasked) when include_identity."""
    if f_max is None:
        f_max = float(num_bands)
    if not 0.0 <= f_max <= num_bands:
        raise ValueError(f"f_max {f_max} outside [0, {num_bands}]")
    mask = band_mask(num_bands, float(f_max), smooth, p.dtype, p.device)
    freqs = (2.0 ** torch.arange(num_bands, dtype=p.dtype, device=p.device)) * math.pi
    angles = p[..., None, :] * freqs[:, None]  # (..., L, D)
    feats = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)  # (..., L, 2D)
    feats = feats * mask[:, None]
    feats = feats.flatten(start_dim=-2)
    if include_identity:
        feats = torch.cat([p, feats], dim=-1)
    return feats


def encoding_width(num_bands: int, dims: int = 3, include_identity: bool = True) -> int:
    return dims * (2 * num_bands + (1 if include_identity else 0))


def frequency_max(t: int, schedule, num_bands: int) -> float:
    """Maximum open frequency at iteration t: a linear ramp from 0 that hits
    num_bands at schedule.t_freq_end and is clamped there on."""
    if t < 0:
        raise ValueError("iteration index must be nonnegative")
    return num_bands * min(1.0, t / schedule.t_freq_end)


class RadianceField(nn.Module):
    """Single MLP with ReLU hidden layers, a softplus density head evaluated
    before direction conditioning, and a sigmoid color head.

    Points are divided by `scene_bound` before encoding so world coordinates
    land in [-1, 1].
    """

    def __init__(
        self,
        encoding: EncodingConfig | None = None,
        depth: int = 8,
        width: int = 128,
        skip_layers: tuple[int, ...] = (4,),
        scene_bound: float = 1.0,
        smooth_mask: bool = False,
    ):
        super().__init__()
        self.encoding = encoding or EncodingConfig()
        self.depth = depth
        self.width = width
        self.scene_bound = float(scene_bound)
        self.smooth_mask = smooth_mask
        self.skip_layers = tuple(s for s in skip_layers if 0 < s < depth)

        pos_dim = encoding_width(self.encoding.l_pos, 3, self.encoding.include_identity)
        dir_dim = encoding_width(self.encoding.l_dir, 3, self.encoding.include_identity)
        layers = []
        in_dim = pos_dim
        for i in range(depth):
            layers.append(nn.Linear(in_dim, width))
            in_dim = width + (pos_dim if (i + 1) in self.skip_layers else 0)
        self.layers = nn.ModuleList(layers)
        self.density_head = nn.Linear(width, 1)
        self.feature = nn.Linear(width, width)
        self.color_hidden = nn.Linear(width + dir_dim, max(width // 2, 16))
        self.color_head = nn.Linear(max(width // 2, 16), 3)

    def forward(
        self,
        points: torch.Tensor,
        dirs: torch.Tensor,
        f_max_pos: float | None = None,
        f_max_dir: float | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(sigma (N,), rgb (N, 3)) for unit view directions at world points."""
        enc_pos = positional_encoding(
            points / self.scene_bound,
            self.encoding.l_pos,
            f_max_pos,
            self.encoding.include_identity,
            self.smooth_mask,
        )
        enc_dir = positional_encoding(
            dirs,
            self.encoding.l_dir,
            f_max_dir,
            self.encoding.include_identity,
            self.smooth_mask,
        )
        h = enc_pos
        for i, layer in enumerate(self.layers):
            h = torch.relu(layer(h))
            if (i + 1) in self.skip_layers:
                h = torch.cat([h, enc_pos], dim=-1)
        sigma = nn.functional.softplus(self.density_head(h)).squeeze(-1)
        feat = self.feature(h)
        color = torch.relu(self.color_hidden(torch.cat([feat, enc_dir], dim=-1)))
        rgb = torch.sigmoid(self.color_head(color))
        return sigma, rgb


@dataclass(eq=False)
class RenderOutput:
    rgb: torch.Tensor  # (R, 3)
    sigma: torch.Tensor  # (R, N) per-sample densities, exposed for the occlusion loss
    weights: torch.Tensor  # (R, N)
    opacity: torch.Tensor  # (R,)


def sample_depths(
    near: float,
    far: float,
    n_rays: int,
    n_samples: int,
    stratified: bool = True,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Depths on equal bins of [near, far]: bin lower edges, jittered
    uniformly within each bin when stratified."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    width = (far - near) / n_samples
    edges = near + width * torch.arange(n_samples, dtype=dtype)
    depths = edges.expand(n_rays, n_samples)
    if stratified:
        jitter = torch.rand(n_rays, n_samples, dtype=dtype, generator=generator)
        depths = depths + width * jitter
    return depths.contiguous()


def volume_render(
    sigma: torch.Tensor,
    rgb: torch.Tensor,
    depths: torch.Tensor,
    far: float,
    white_background: bool = False,
) -> RenderOutput:
    """Emission-absorption quadrature.

    alpha_k = 1 - exp(-sigma_k * delta_k) with delta_k the gap to the next
    sample and the last gap closing at `far`; weights are alpha times
    accumulated transmittance. Matches the numpy oracle's compositing.
    """
    deltas = depths[:, 1:] - depths[:, :-1]
    if bool((deltas <= 0).any()):
        raise ValueError("sample depths must be strictly increasing along each ray")
    deltas = torch.cat([deltas, far - depths[:, -1:]], dim=-1)
    alpha = 1.0 - torch.exp(-sigma * deltas)
    trans = torch.cumprod(1.0 - alpha + 1e-12, dim=-1)
    trans = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=-1)
    weights = alpha * trans
    out_rgb = (weights[..., None] * rgb).sum(dim=-2)
    opacity = weights.sum(dim=-1)
    if white_background:
        out_rgb = out_rgb + (1.0 - opacity)[:, None]
    return RenderOutput(out_rgb, sigma, weights, opacity)


def finite_difference_max_error(
    loss_fn,
    params: list[torch.Tensor],
    eps: float = 1e-7,
    max_coords: int = 60,
    seed: int = 0,
    refine_threshold: float = 1e-4,
) -> tuple[float, list[float]]:
    """Central finite differences of loss_fn against autograd, on a random
    subset of parameter coordinates. Returns (max relative error, per-coord
    errors). loss_fn must be deterministic.

    Coordinates whose first-pass error exceeds refine_threshold are
    re-measured at eps/4 and keep the smaller error: a ReLU kink inside the
    difference interval corrupts one step size but not both, while a wrong
    analytic gradient fails at every step size.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [
        g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)
    ]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(k)] for k in picked]

    def rel_error(i: int, j: int, step: float) -> float:
        flat = params[i].view(-1)
        original = flat[j].item()
        flat[j] = original + step
        loss_plus = float(loss_fn())
        flat[j] = original - step
        loss_minus = float(loss_fn())
        flat[j] = original
        fd = (loss_plus - loss_minus) / (2.0 * step)
        an = float(analytic[i].view(-1)[j])
        # the floor keeps near-zero-gradient coordinates from reading FD
        # noise as relative error; agreement below it is absolute
        return abs(fd - an) / max(abs(fd), abs(an), 1e-6)

    errors = []
    with torch.no_grad():
        for i, j in coords:
            err = rel_error(i, j, eps)
            if err > refine_threshold:
                err = min(err, rel_error(i, j, eps / 4.0))
            errors.append(err)
    return (max(errors) if errors else 0.0), errors


@dataclass
class GradCheckResult:
    max_rel_error: float
    num_coords: int
    gated_camera_grad_max: float  # max |analytic grad| over gated camera params


def gradient_check(
    field: RadianceField,
    cameras,
    pixels,
    images,
    masks,
    schedule,
    s3im_config,
    t: int,
    render: RenderConfig,
    eps: float = 1e-7,
    max_coords: int = 60,
    seed: int = 0,
) -> GradCheckResult:
    """Finite-difference validation of the full training gradient path.

    Runs in double precision on copies of the modules. Camera parameters are
    included when the gate at iteration t is open; when closed, their
    analytic gradient is verified to be exactly zero instead.

    The default step balances central-difference truncation against ReLU
    kink crossings (camera parameters move every ray of a view, so the loss
    is only piecewise smooth at any usable step size).
    """
    from .cameras import camera_gate
    from .losses import total_loss

    field64 = copy.deepcopy(field).double()
    cameras64 = copy.deepcopy(cameras).double()
    gate = camera_gate(t, cameras64)
    f_pos = frequency_max(t, schedule, field64.encoding.l_pos)
    f_dir = frequency_max(t, schedule, field64.encoding.l_dir)
    images64 = [np.asarray(img, dtype=np.float64) for img in images]

    def loss_fn():
        batch = cameras64.generate_rays(pixels, images64, masks, train_camera=gate)
        n_rays = len(batch)
        depths = sample_depths(
            render.near, render.far, n_rays, render.samples_per_ray,
            stratified=False, dtype=torch.float64,
        )
        points = batch.origins[:, None, :] + depths[..., None] * batch.directions[:, None, :]
        dirs = batch.directions[:, None, :].expand_as(points)
        sigma, rgb = field64(points.reshape(-1, 3), dirs.reshape(-1, 3), f_pos, f_dir)
        out = volume_render(
            sigma.view(n_rays, -1),
            rgb.view(n_rays, -1, 3),
            depths,
            render.far,
            render.white_background,
        )
        total, _ = total_loss(out, batch.gt_rgb, t, schedule, s3im_config, s3im_seed=seed)
        return total

    camera_params = [p for p in cameras64.parameters() if p is not None]
    gated_max = 0.0
    if gate:
        params = list(field64.parameters()) + camera_params
    else:
        params = list(field64.parameters())
        loss = loss_fn()
        grads = torch.autograd.grad(loss, camera_params, allow_unused=True)
        gated_max = max(
            (float(g.abs().max()) for g in grads if g is not None), default=0.0
        )

    max_err, errors = finite_difference_max_error(loss_fn, params, eps, max_coords, seed)
    return GradCheckResult(max_err, len(errors), gated_max)
