"""Loss terms and iteration-indexed schedules.

Three supervision terms: masked photometric MSE, an annealed density penalty
on near-camera ray samples (cosine ramp between t_start and t_end), and a
stochastic structural-similarity loss over randomly regrouped ray patches.
The annealing end is coupled to the frequency-ramp end through a divisor
(t_end = t_freq_end / lambda) unless overridden explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch

ABLATION_MODES = ("masked_nerf", "+camera", "+oar", "+s3im")


@dataclass
class ScheduleState:
    """All iteration-indexed knobs for one run.

    None fields resolve to their defaults: t_freq_end = 0.1 * total_iters,
    t_c = 0.2 * total_iters, t_end = t_freq_end / lambda_anneal (rounded,
    half away from zero).
    """

    total_iters: int
    t_freq_end: int | None = None
    t_c: int | None = None
    lambda_anneal: float = 100.0
    t_end: int | None = None
    t_start: int = 0
    w_full: float = 1.0
    w_s3im: float = 0.01
    w_occ_coeff: float = 0.01
    occ_near_fraction: float = 0.2

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")
        if self.t_freq_end is None:
            self.t_freq_end = max(1, round(0.1 * self.total_iters))
        if self.t_c is None:
            self.t_c = round(0.2 * self.total_iters)
        if self.t_end is None:
            self.t_end = schedule_coupling(self)
        if not 0 < self.t_freq_end <= self.total_iters:
            raise ValueError("t_freq_end must lie in (0, total_iters]")
        if not 0 <= self.t_c <= self.total_iters:
            raise ValueError("t_c must lie in [0, total_iters]")
        if not 0 <= self.t_start < self.t_end <= self.total_iters:
            raise ValueError(
                f"schedule needs 0 <= t_start < t_end <= T, got "
                f"t_start={self.t_start}, t_end={self.t_end}, T={self.total_iters}"
            )
        if not 0.0 < self.occ_near_fraction <= 1.0:
            raise ValueError("occ_near_fraction must lie in (0, 1]")


def schedule_coupling(s: ScheduleState) -> int:
    """Annealing end derived from the frequency-ramp end: t_freq_end / lambda,
    rounded half away from zero."""
    if s.lambda_anneal <= 0:
        raise ValueError("lambda_anneal must be positive")
    t_end = int(math.floor(s.t_freq_end / s.lambda_anneal + 0.5))
    if t_end <= s.t_start:
        raise ValueError(
            f"coupled t_end={t_end} does not exceed t_start={s.t_start}; "
            "override t_end explicitly"
        )
    return t_end


def occ_weight(t: int, s: ScheduleState) -> float:
    """Cosine ramp of the occlusion penalty weight: 0 before t_start, w_full
    from t_end on, half-cosine in between (0 at t_start, w_full at t_end)."""
    if t < s.t_start:
        return 0.0
    if t >= s.t_end:
        return s.w_full
    phase = math.pi * (s.t_end - t) / (s.t_end - s.t_start)
    return 0.5 * s.w_full * (1.0 + math.cos(phase))


def occ_base(sigma_samples: torch.Tensor, near_fraction: float) -> torch.Tensor:
    """Mean over rays of sum(sigma_k * m_k) / N where m_k selects the first
    ceil(near_fraction * N) depth-ordered samples."""
    n = sigma_samples.shape[-1]
    k_cut = math.ceil(near_fraction * n)
    return sigma_samples[..., :k_cut].sum(dim=-1).div(n).mean()


def occ_loss(sigma_samples: torch.Tensor, t: int, s: ScheduleState) -> torch.Tensor:
    return occ_weight(t, s) * occ_base(sigma_samples, s.occ_near_fraction)


def masked_mse(pred_rgb: torch.Tensor, gt_rgb: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all ray channels. The sampler contract
    guarantees only valid pixels reach this point."""
    if pred_rgb.numel() == 0:
        raise ValueError("empty batch")
    return ((pred_rgb - gt_rgb) ** 2).mean()


@dataclass
class S3IMConfig:
    """Patch regrouping and SSIM settings. Stride equals the window size, so
    windows tile each patch without overlap. Stabilizers assume unit dynamic
    range."""

    patch_side: int = 64
    patch_count: int | None = None
    window: int = 4
    c1: float = 0.01**2
    c2: float = 0.03**2

    def __post_init__(self):
        if self.patch_side < 1 or self.window < 1:
            raise ValueError("patch_side and window must be positive")
        if self.patch_side % self.window != 0:
            raise ValueError(
                f"patch side {self.patch_side} not divisible by window {self.window}"
            )

    def resolve_patch_count(self, num_rays: int) -> int:
        area = self.patch_side**2
        m = self.patch_count if self.patch_count is not None else max(1, num_rays // area)
        if m * area > num_rays:
            raise ValueError(
                f"insufficient rays: {num_rays} < {m} patches x {area} pixels"
            )
        return m


def _windowed_ssim(a: torch.Tensor, b: torch.Tensor, cfg: S3IMConfig) -> torch.Tensor:
    """SSIM over non-overlapping window x window tiles, per channel.

    a, b: (M, K, K, C). Returns the mean over patches, tiles and channels.
    Uses population variances; self-similarity is exactly 1.
    """
    m, k, _, c = a.shape
    w = cfg.window
    tiles = k // w

    def stats(x):
        x = x.reshape(m, tiles, w, tiles, w, c)
        x = x.permute(0, 1, 3, 5, 2, 4).reshape(m, tiles, tiles, c, w * w)
        return x

    xa, xb = stats(a), stats(b)
    mu_a = xa.mean(dim=-1)
    mu_b = xb.mean(dim=-1)
    var_a = (xa * xa).mean(dim=-1) - mu_a * mu_a
    var_b = (xb * xb).mean(dim=-1) - mu_b * mu_b
    cov = (xa * xb).mean(dim=-1) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + cfg.c1) * (2.0 * cov + cfg.c2)
    den = (mu_a * mu_a + mu_b * mu_b + cfg.c1) * (var_a + var_b + cfg.c2)
    return (num / den).mean()


def ssim_patch(a: torch.Tensor, b: torch.Tensor, cfg: S3IMConfig) -> torch.Tensor:
    """Structural similarity of one K x K x C patch pair."""
    if a.shape != b.shape:
        raise ValueError("patch shapes differ")
    if a.shape[0] % cfg.window != 0:
        raise ValueError(f"patch side {a.shape[0]} not divisible by window {cfg.window}")
    return _windowed_ssim(a[None], b[None], cfg)


def s3im(
    pred_rays: torch.Tensor, gt_rays: torch.Tensor, cfg: S3IMConfig, seed: int
) -> torch.Tensor:
    """Stochastic structural similarity over rays drawn across all views.

    A seed-deterministic permutation reorders the rays; the first M * K^2 of
    them form M square patches, and the same grouping applies to predictions
    and ground truth.
    """
    n = pred_rays.shape[0]
    m = cfg.resolve_patch_count(n)
    k = cfg.patch_side
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    perm = torch.randperm(n, generator=gen)[: m * k * k]
    a = pred_rays[perm].reshape(m, k, k, -1)
    b = gt_rays[perm].reshape(m, k, k, -1)
    return _windowed_ssim(a, b, cfg)


def s3im_loss(
    pred_rays: torch.Tensor, gt_rays: torch.Tensor, cfg: S3IMConfig, seed: int
) -> torch.Tensor:
    """1 - s3im; lies in [0, 2] since SSIM lies in [-1, 1]."""
    return 1.0 - s3im(pred_rays, gt_rays, cfg, seed)


def apply_ablation(schedule: ScheduleState, mode: str) -> tuple[ScheduleState, bool]:
    """Gate loss terms and camera training per ablation mode.

    Returns (adjusted schedule, camera_enabled). Modes accumulate: camera
    optimization from '+camera' on, the occlusion penalty from '+oar' on,
    the patch similarity loss only at '+s3im'.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    rank = ABLATION_MODES.index(mode)
    return (
        replace(
            schedule,
            w_occ_coeff=schedule.w_occ_coeff if rank >= 2 else 0.0,
            w_s3im=schedule.w_s3im if rank >= 3 else 0.0,
        ),
        rank >= 1,
    )


def total_loss(
    render_output,
    gt_rgb: torch.Tensor,
    t: int,
    schedule: ScheduleState,
    s3im_cfg: S3IMConfig,
    s3im_seed: int,
) -> tuple[torch.Tensor, dict]:
    """Weighted sum of the three terms plus a per-term breakdown for logging.

    Breakdown values are the actual loss contributions (coefficient and, for
    the occlusion term, annealing weight included), plus the current
    annealing weight itself under 'w_occ'.
    """
    mse = masked_mse(render_output.rgb, gt_rgb)
    total = mse
    w_occ = occ_weight(t, schedule)
    occ_term = torch.zeros((), dtype=mse.dtype)
    if schedule.w_occ_coeff != 0.0 and w_occ != 0.0:
        occ_term = schedule.w_occ_coeff * w_occ * occ_base(
            render_output.sigma, schedule.occ_near_fraction
        )
        total = total + occ_term
    s3im_term = torch.zeros((), dtype=mse.dtype)
    if schedule.w_s3im != 0.0:
        s3im_term = schedule.w_s3im * s3im_loss(
            render_output.rgb, gt_rgb, s3im_cfg, s3im_seed
        )
        total = total + s3im_term
    breakdown = {
        "mse": float(mse.detach()),
        "occ": float(occ_term.detach()),
        "s3im": float(s3im_term.detach()),
        "w_occ": w_occ,
    }
    return total, breakdown
