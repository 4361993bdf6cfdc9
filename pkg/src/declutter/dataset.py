"""Posed multi-view dataset I/O and prompt propagation.

Directory layout::

    <root>/
        images/000.png ...   8-bit RGB
        masks/000.png  ...   8-bit, 0 (valid) or 255 (occluded)
        cameras.json         intrinsics, 3x4 poses (row-major), near, far,
                             holdout_indices
        points.json          optional sparse point cloud with per-point
                             (view_index, pixel_xy) observations

Mask semantics: 1 marks occluded pixels excluded from supervision and
metrics, 0 marks usable pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import project_points

DEFAULT_PROMPT_RADIUS = 8.0


class DatasetError(Exception):
    """Raised when a dataset directory is missing files or inconsistent."""


@dataclass(eq=False)
class PosedImageSet:
    images: list[np.ndarray]  # each (H, W, 3) float in [0, 1]
    masks: list[np.ndarray]  # each (H, W) uint8 in {0, 1}
    intrinsics: tuple[float, float, float, float]
    poses: np.ndarray  # (V, 3, 4) world-from-camera
    near: float
    far: float
    holdout_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        self.validate()

    def validate(self):
        v = len(self.images)
        if v < 2:
            raise DatasetError("a dataset needs at least 2 views")
        if not (len(self.masks) == v and self.poses.shape == (v, 3, 4)):
            raise DatasetError("images, masks and poses must have equal length")
        shape = self.images[0].shape
        for i, (img, msk) in enumerate(zip(self.images, self.masks)):
            if img.shape != shape or img.ndim != 3 or img.shape[2] != 3:
                raise DatasetError(f"image {i} has shape {img.shape}, expected {shape}")
            if msk.shape != shape[:2]:
                raise DatasetError(f"mask {i} has shape {msk.shape}, expected {shape[:2]}")
        bad = [i for i in self.holdout_indices if not 0 <= i < v]
        if bad:
            raise DatasetError(f"holdout indices {bad} out of range [0, {v})")
        for i in self.train_indices:
            if not np.any(self.masks[i] == 0):
                raise DatasetError(f"training view {i} has no valid pixels")

    @property
    def num_views(self) -> int:
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images[0].shape[0]

    @property
    def width(self) -> int:
        return self.images[0].shape[1]

    @property
    def train_indices(self) -> list[int]:
        held = set(self.holdout_indices)
        return [i for i in range(self.num_views) if i not in held]


@dataclass(eq=False)
class SparsePointCloud:
    points: np.ndarray  # (N, 3)
    observations: list[list[tuple[int, tuple[float, float]]]]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.observations) != self.points.shape[0]:
            raise ValueError("one observation list per point required")


@dataclass
class PropagationResult:
    """Per-prompt projections into every view, plus unmatched prompt indices."""

    point_indices: list[int]
    projections: list[dict[int, tuple[float, float]]]
    unmatched: list[int]


def default_holdouts(num_views: int) -> list[int]:
    """Every 8th view, which holds out 1/8 of the images."""
    return list(range(0, num_views, 8))


def save_dataset(dataset: PosedImageSet, directory, cloud: SparsePointCloud | None = None) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, (img, msk) in enumerate(zip(dataset.images, dataset.masks)):
        img8 = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(root / "images" / f"{i:03d}.png")
        Image.fromarray((np.asarray(msk) > 0).astype(np.uint8) * 255, mode="L").save(
            root / "masks" / f"{i:03d}.png"
        )
    fx, fy, cx, cy = dataset.intrinsics
    cameras = {
        "intrinsics": [fx, fy, cx, cy],
        "poses": [pose.tolist() for pose in dataset.poses],
        "near": dataset.near,
        "far": dataset.far,
        "holdout_indices": list(dataset.holdout_indices),
    }
    (root / "cameras.json").write_text(json.dumps(cameras, indent=2))
    if cloud is not None:
        doc = {
            "points": cloud.points.tolist(),
            "observations": [
                [[view, [u, v]] for view, (u, v) in obs] for obs in cloud.observations
            ],
        }
        (root / "points.json").write_text(json.dumps(doc))


def _load_png(path: Path, expect_rgb: bool) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB" if expect_rgb else "L"))
    return arr


def _downsample_image(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img.reshape(h // scale, scale, w // scale, scale, 3).mean(axis=(1, 3))


def _downsample_mask(msk: np.ndarray, scale: int) -> np.ndarray:
    h, w = msk.shape
    return msk.reshape(h // scale, scale, w // scale, scale).max(axis=(1, 3))


def load_dataset(directory, scale: int = 1) -> PosedImageSet:
    """Load a dataset directory; `scale` box-averages images by an integer
    factor and max-pools masks (any occluded contributor marks the block)."""
    root = Path(directory)
    cameras_path = root / "cameras.json"
    if not cameras_path.exists():
        raise DatasetError(f"missing file: {cameras_path}")
    cams = json.loads(cameras_path.read_text())
    poses = np.asarray(cams["poses"], dtype=np.float64)
    if poses.ndim != 3 or poses.shape[1:] != (3, 4):
        raise DatasetError(f"{cameras_path}: poses must be a list of 3x4 matrices")
    num_views = poses.shape[0]

    images, masks = [], []
    for i in range(num_views):
        img_path = root / "images" / f"{i:03d}.png"
        msk_path = root / "masks" / f"{i:03d}.png"
        img = _load_png(img_path, expect_rgb=True).astype(np.float64) / 255.0
        msk_raw = _load_png(msk_path, expect_rgb=False)
        values = np.unique(msk_raw)
        if not np.all(np.isin(values, (0, 255))):
            raise DatasetError(f"non-binary mask values {values.tolist()} in {msk_path}")
        msk = (msk_raw > 0).astype(np.uint8)
        if img.shape[:2] != msk.shape:
            raise DatasetError(
                f"dimension mismatch between {img_path} {img.shape[:2]} and {msk_path} {msk.shape}"
            )
        if scale > 1:
            if img.shape[0] % scale or img.shape[1] % scale:
                raise DatasetError(
                    f"{img_path}: size {img.shape[:2]} not divisible by scale {scale}"
                )
            img = _downsample_image(img, scale)
            msk = _downsample_mask(msk, scale)
        images.append(img)
        masks.append(msk)

    holdouts = cams.get("holdout_indices")
    if holdouts is None:
        holdouts = default_holdouts(num_views)
    fx, fy, cx, cy = cams["intrinsics"]
    if scale > 1:
        fx, fy, cx, cy = (v / scale for v in (fx, fy, cx, cy))
    return PosedImageSet(
        images=images,
        masks=masks,
        intrinsics=(fx, fy, cx, cy),
        poses=poses,
        near=float(cams["near"]),
        far=float(cams["far"]),
        holdout_indices=[int(i) for i in holdouts],
    )


def load_point_cloud(directory) -> SparsePointCloud:
    path = Path(directory) / "points.json"
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    doc = json.loads(path.read_text())
    observations = [
        [(int(view), (float(uv[0]), float(uv[1]))) for view, uv in obs]
        for obs in doc["observations"]
    ]
    return SparsePointCloud(points=np.asarray(doc["points"]), observations=observations)


def propagate_prompts(
    prompts,
    view_index: int,
    cloud: SparsePointCloud,
    dataset: PosedImageSet,
    pixel_radius: float = DEFAULT_PROMPT_RADIUS,
) -> PropagationResult:
    """Carry single-view point prompts into every view via the sparse cloud.

    Each prompt selects the cloud point whose observation in `view_index` is
    nearest (within `pixel_radius`); that 3D point is projected into all views
    with the dataset's cameras. Projections behind a camera or outside the
    image are dropped. Prompts with no observation in range are reported in
    `unmatched` rather than silently skipped.
    """
    if cloud.points.shape[0] == 0:
        raise ValueError("sparse point cloud is empty")
    if not 0 <= view_index < dataset.num_views:
        raise ValueError(f"prompt view {view_index} out of range")

    obs_points = []
    obs_pixels = []
    for point_idx, obs in enumerate(cloud.observations):
        for view, (u, v) in obs:
            if view == view_index:
                obs_points.append(point_idx)
                obs_pixels.append((u, v))
    obs_points = np.asarray(obs_points, dtype=np.int64)
    obs_pixels = np.asarray(obs_pixels, dtype=np.float64).reshape(-1, 2)

    point_indices: list[int] = []
    projections: list[dict[int, tuple[float, float]]] = []
    unmatched: list[int] = []
    prompts = np.asarray(prompts, dtype=np.float64).reshape(-1, 2)
    for prompt_idx, prompt in enumerate(prompts):
        if obs_points.size == 0:
            unmatched.append(prompt_idx)
            continue
        d2 = np.sum((obs_pixels - prompt) ** 2, axis=-1)
        best = int(np.argmin(d2))
        if d2[best] > pixel_radius * pixel_radius:
            unmatched.append(prompt_idx)
            continue
        point = cloud.points[obs_points[best]]
        per_view: dict[int, tuple[float, float]] = {}
        for view in range(dataset.num_views):
            uv, z = project_points(point[None], dataset.poses[view], dataset.intrinsics)
            u, v = uv[0]
            if z[0] <= 1e-9:
                continue
            if -0.5 <= u <= dataset.width - 0.5 and -0.5 <= v <= dataset.height - 0.5:
                per_view[view] = (float(u), float(v))
        point_indices.append(int(obs_points[best]))
        projections.append(per_view)
    return PropagationResult(point_indices, projections, unmatched)
