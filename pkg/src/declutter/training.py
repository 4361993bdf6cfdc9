"""Training loop: joint field + camera optimization with all schedules.

Per iteration: sample valid pixels uniformly per view, generate rays (camera
gradients gated until t_c), stratified-sample the rays, run the field at the
current frequency ramp, volume-render, apply the combined loss, and take an
Adam step with exponentially decaying learning rates. Every stochastic
choice is drawn from one checkpointable torch generator, so a resumed run
replays the uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .cameras import CameraState, camera_gate
from .dataset import PosedImageSet, load_dataset
from .field import (
    EncodingConfig,
    RadianceField,
    frequency_max,
    sample_depths,
    volume_render,
)
from .losses import S3IMConfig, ScheduleState, apply_ablation, total_loss
from .sampling import PixelSampler

METRIC_COLUMNS = ("iter", "mse", "occ", "s3im", "w_occ", "f_max", "psnr_val")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, breakdown: dict):
        super().__init__(f"non-finite loss at iteration {iteration}: {breakdown}")
        self.iteration = iteration
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    dataset_dir: str | None = None
    scale: int = 1
    total_iters: int = 5000
    batch_size: int = 1024
    samples_per_ray: int = 32
    mlp_depth: int = 8
    mlp_width: int = 128
    l_pos: int = 10
    l_dir: int = 4
    scene_bound: float | None = None
    white_background: bool = False
    lr_field: float = 5e-4
    lr_camera: float = 1e-3
    lr_final_scale: float = 0.1
    lr_camera_final_scale: float | None = None  # None: share the field decay
    seed: int = 0
    ablation_mode: str = "+s3im"
    smooth_frequency_mask: bool = False
    tie_focal: bool = False
    log_every: int = 100
    checkpoint_every: int | None = None
    render_chunk: int = 4096
    final_holdout_psnr: bool = False
    # schedules
    t_freq_end: int | None = None
    t_c: int | None = None
    lambda_anneal: float = 100.0
    t_end: int | None = None
    t_start: int = 0
    w_full: float = 1.0
    w_s3im: float = 0.01
    w_occ_coeff: float = 0.01
    occ_near_fraction: float = 0.2
    # s3im
    s3im_patch_side: int = 64
    s3im_patch_count: int | None = None
    s3im_window: int = 4

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def schedule(self) -> ScheduleState:
        return ScheduleState(
            total_iters=self.total_iters,
            t_freq_end=self.t_freq_end,
            t_c=self.t_c,
            lambda_anneal=self.lambda_anneal,
            t_end=self.t_end,
            t_start=self.t_start,
            w_full=self.w_full,
            w_s3im=self.w_s3im,
            w_occ_coeff=self.w_occ_coeff,
            occ_near_fraction=self.occ_near_fraction,
        )

    def s3im(self) -> S3IMConfig:
        return S3IMConfig(
            patch_side=self.s3im_patch_side,
            patch_count=self.s3im_patch_count,
            window=self.s3im_window,
        )


@dataclass(eq=False)
class TrainResult:
    config: TrainConfig
    field: RadianceField
    cameras: CameraState
    schedule: ScheduleState
    metrics: list[dict]
    checkpoint_paths: list[Path]

    @property
    def final_checkpoint(self) -> Path:
        if not self.checkpoint_paths:
            raise ValueError("run was not given an output directory")
        return self.checkpoint_paths[-1]


def build_modules(config: TrainConfig, dataset: PosedImageSet) -> tuple[RadianceField, CameraState]:
    """Field and camera modules for a dataset; seeds torch's global RNG so the
    MLP initialization is reproducible."""
    torch.manual_seed(config.seed)
    schedule = config.schedule()
    bound = config.scene_bound if config.scene_bound is not None else dataset.far
    field = RadianceField(
        encoding=EncodingConfig(l_pos=config.l_pos, l_dir=config.l_dir),
        depth=config.mlp_depth,
        width=config.mlp_width,
        scene_bound=bound,
        smooth_mask=config.smooth_frequency_mask,
    )
    cameras = CameraState(
        intrinsics=dataset.intrinsics,
        base_poses=dataset.poses,
        trainable_from=schedule.t_c,
        tie_fy=config.tie_focal,
    )
    return field, cameras


def _decayed_lr(base: float, t: int, total: int, final_scale: float) -> float:
    return base * final_scale ** (t / total)


def _restore_optimizer(optimizer, data: ckpt.CheckpointData, named: dict[str, torch.Tensor]):
    for name, step in data.adam_steps.items():
        param = named[name]
        optimizer.state[param] = {
            "step": torch.tensor(float(step)),
            "exp_avg": data.tensor(f"adam.{name}.exp_avg"),
            "exp_avg_sq": data.tensor(f"adam.{name}.exp_avg_sq"),
        }


def train(
    config: TrainConfig,
    dataset: PosedImageSet | None = None,
    out_dir=None,
    resume_from=None,
) -> TrainResult:
    """Run (or resume) a full training job.

    When out_dir is given, writes metrics.csv, periodic checkpoints, and a
    final checkpoint.ckpt there. Holdout images are never touched by the
    loop; the optional final validation PSNR is computed after the last
    update.
    """
    if dataset is None:
        if config.dataset_dir is None:
            raise ValueError("config has no dataset_dir and no dataset was passed")
        dataset = load_dataset(config.dataset_dir, scale=config.scale)

    schedule = config.schedule()
    schedule_eff, camera_enabled = apply_ablation(schedule, config.ablation_mode)
    s3im_cfg = config.s3im()
    if schedule_eff.w_s3im != 0.0:
        s3im_cfg.resolve_patch_count(config.batch_size)  # fail fast if B too small

    field, cameras = build_modules(config, dataset)
    generator = torch.Generator()
    generator.manual_seed(config.seed)

    optimizer = torch.optim.Adam(
        [
            {"params": list(field.parameters()), "lr": config.lr_field},
            {
                "params": [p for p in cameras.parameters() if p is not None],
                "lr": config.lr_camera,
            },
        ]
    )

    start_iter = 0
    if resume_from is not None:
        data = resume_from if isinstance(resume_from, ckpt.CheckpointData) else ckpt.load_checkpoint(resume_from)
        if data.config and ckpt.config_hash(data.config) != ckpt.config_hash(config.to_dict()):
            raise ValueError("checkpoint config does not match the current config")
        named: dict[str, torch.Tensor] = {}
        with torch.no_grad():
            for name, param in field.named_parameters():
                param.copy_(data.tensor(f"field.{name}"))
                named[f"field.{name}"] = param
            for name, param in cameras.named_parameters():
                param.copy_(data.tensor(f"camera.{name}"))
                named[f"camera.{name}"] = param
        _restore_optimizer(optimizer, data, named)
        if data.rng_state is not None:
            ckpt.restore_generator(generator, data.rng_state)
        start_iter = data.iteration

    sampler = PixelSampler(dataset, generator)
    train_images = {
        v: torch.as_tensor(np.asarray(dataset.images[v]), dtype=torch.float32)
        for v in dataset.train_indices
    }

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    ckpt_every = config.checkpoint_every or max(1, config.total_iters // 10)
    checkpoint_paths: list[Path] = []
    metrics: list[dict] = []
    near, far = dataset.near, dataset.far

    def save(iteration: int, name: str | None = None) -> None:
        if out_path is None:
            return
        filename = name or f"ckpt_{iteration:06d}.ckpt"
        path = ckpt.save_checkpoint(
            out_path / filename, iteration, config.to_dict(), field, cameras, optimizer, generator
        )
        checkpoint_paths.append(path)

    for t in range(start_iter + 1, config.total_iters + 1):
        gate = camera_enabled and camera_gate(t, cameras)
        views, xy = sampler.sample(config.batch_size)
        batch = cameras.generate_rays((views, xy), train_images, masks=None, train_camera=gate)

        depths = sample_depths(
            near, far, config.batch_size, config.samples_per_ray,
            stratified=True, generator=generator,
        )
        points = batch.origins[:, None, :] + depths[..., None] * batch.directions[:, None, :]
        dirs = batch.directions[:, None, :].expand_as(points)

        f_pos = frequency_max(t, schedule_eff, config.l_pos)
        f_dir = frequency_max(t, schedule_eff, config.l_dir)
        sigma, rgb = field(points.reshape(-1, 3), dirs.reshape(-1, 3), f_pos, f_dir)
        render = volume_render(
            sigma.view(config.batch_size, -1),
            rgb.view(config.batch_size, -1, 3),
            depths,
            far,
            config.white_background,
        )

        s3im_seed = int(torch.randint(0, 2**31 - 1, (1,), generator=generator))
        total, breakdown = total_loss(render, batch.gt_rgb, t, schedule_eff, s3im_cfg, s3im_seed)
        if not math.isfinite(float(total.detach())):
            raise TrainingDiverged(t, breakdown)

        optimizer.param_groups[0]["lr"] = _decayed_lr(
            config.lr_field, t, config.total_iters, config.lr_final_scale
        )
        camera_scale = (
            config.lr_camera_final_scale
            if config.lr_camera_final_scale is not None
            else config.lr_final_scale
        )
        optimizer.param_groups[1]["lr"] = _decayed_lr(
            config.lr_camera, t, config.total_iters, camera_scale
        )
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        if not gate:
            for param in cameras.parameters():
                if param is not None:
                    param.grad = None
        optimizer.step()

        if t % config.log_every == 0 or t == config.total_iters:
            metrics.append(
                {
                    "iter": t,
                    "mse": breakdown["mse"],
                    "occ": breakdown["occ"],
                    "s3im": breakdown["s3im"],
                    "w_occ": breakdown["w_occ"],
                    "f_max": f_pos,
                    "psnr_val": "",
                }
            )
        if t % ckpt_every == 0 and t != config.total_iters:
            save(t)

    if config.final_holdout_psnr and dataset.holdout_indices and metrics:
        from .evaluation import psnr_masked

        view = dataset.holdout_indices[0]
        image = render_view(
            field,
            dataset.poses[view],
            dataset.intrinsics,
            (dataset.width, dataset.height),
            near,
            far,
            config.samples_per_ray,
            config.white_background,
            chunk=config.render_chunk,
        )
        metrics[-1]["psnr_val"] = psnr_masked(
            image, np.asarray(dataset.images[view]), np.asarray(dataset.masks[view])
        )

    save(config.total_iters, name="checkpoint.ckpt")
    if out_path is not None:
        write_metrics_csv(out_path / "metrics.csv", metrics)

    return TrainResult(config, field, cameras, schedule_eff, metrics, checkpoint_paths)


def write_metrics_csv(path, metrics: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in metrics:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def render_view(
    field: RadianceField,
    pose: np.ndarray,
    intrinsics,
    resolution,
    near: float,
    far: float,
    samples_per_ray: int,
    white_background: bool = False,
    chunk: int = 4096,
) -> np.ndarray:
    """Full-image render at full frequency with deterministic depth samples.

    `resolution` is (W, H); returns an (H, W, 3) float array.
    """
    from .geometry import pixel_rays

    width, height = int(resolution[0]), int(resolution[1])
    origins, dirs = pixel_rays(np.asarray(pose, dtype=np.float64), intrinsics, width, height)
    origins_t = torch.as_tensor(origins, dtype=torch.float32)
    dirs_t = torch.as_tensor(dirs, dtype=torch.float32)
    out = torch.empty(origins_t.shape[0], 3)
    with torch.no_grad():
        for lo in range(0, origins_t.shape[0], chunk):
            hi = min(lo + chunk, origins_t.shape[0])
            depths = sample_depths(near, far, hi - lo, samples_per_ray, stratified=False)
            points = origins_t[lo:hi, None, :] + depths[..., None] * dirs_t[lo:hi, None, :]
            ray_dirs = dirs_t[lo:hi, None, :].expand_as(points)
            sigma, rgb = field(points.reshape(-1, 3), ray_dirs.reshape(-1, 3))
            render = volume_render(
                sigma.view(hi - lo, -1), rgb.view(hi - lo, -1, 3), depths, far, white_background
            )
            out[lo:hi] = render.rgb
    return out.numpy().reshape(height, width, 3)


def load_trained(checkpoint_path, dataset: PosedImageSet | None = None):
    """Rebuild (config, field, cameras, dataset) from a checkpoint file."""
    data = ckpt.load_checkpoint(checkpoint_path)
    config = TrainConfig.from_dict(data.config)
    if dataset is None:
        if config.dataset_dir is None:
            raise ValueError("checkpoint config has no dataset_dir; pass a dataset")
        dataset = load_dataset(config.dataset_dir, scale=config.scale)
    field, cameras = build_modules(config, dataset)
    with torch.no_grad():
        for name, param in field.named_parameters():
            param.copy_(data.tensor(f"field.{name}"))
        for name, param in cameras.named_parameters():
            param.copy_(data.tensor(f"camera.{name}"))
    return config, field, cameras, dataset
