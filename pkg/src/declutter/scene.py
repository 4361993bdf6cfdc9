"""Synthetic multi-view scenes with exact ground truth.

Scenes are unions of constant-density primitives (spheres, boxes, slabs) with
first-listed-wins overlap resolution, so transmittance along any ray has a
closed form. Everything the training stack consumes (images, occluder masks,
cameras, per-pixel cross-view visibility, sparse point clouds) can be derived
here analytically, which makes this module the ground-truth oracle for the
test and acceptance suites.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
import numpy as np

from .geometry import camera_center, pixel_rays, project_points, rodrigues

_SHAPES = ("sphere", "box", "slab")

# A view "sees" a surface point when the point lies within this distance of
# the view's own first-hit depth along the reprojected ray.
VISIBILITY_DEPTH_TOL = 1e-3


@dataclass(eq=False)
class Primitive:
    """Constant-density solid. `extent` is a half-size 3-vector for boxes and
    slabs; for spheres only extent[0] (the radius) is used."""

    shape: str
    center: np.ndarray
    extent: np.ndarray
    density: float
    albedo: np.ndarray
    is_occluder: bool = False

    def __post_init__(self):
        if self.shape not in _SHAPES:
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        extent = np.asarray(self.extent, dtype=np.float64).reshape(-1)
        if extent.size == 1:
            extent = np.repeat(extent, 3)
        self.extent = extent.reshape(3)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if self.density < 0:
            raise ValueError("density must be nonnegative")
        if np.any(self.extent <= 0):
            raise ValueError("extent components must be positive")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo components must lie in [0, 1]")

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        delta = points - self.center
        if self.shape == "sphere":
            radius = self.extent[0]
            return np.einsum("...i,...i->...", delta, delta) <= radius * radius
        return np.all(np.abs(delta) <= self.extent, axis=-1)

    def ray_entry(self, origins: np.ndarray, dirs: np.ndarray, eps: float = 1e-9) -> np.ndarray:
        """Parameter of the first surface crossing along each ray (inf = miss).

        Rays starting inside the primitive report the exit crossing, which is
        still the first surface the ray meets.
        """
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        if self.shape == "sphere":
            radius = self.extent[0]
            oc = origins - self.center
            b = np.einsum("...i,...i->...", oc, dirs)
            c = np.einsum("...i,...i->...", oc, oc) - radius * radius
            disc = b * b - c
            sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
            t_near = -b - sqrt_disc
            t_far = -b + sqrt_disc
            miss = disc < 0
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
            lo = (self.center - self.extent - origins) * inv
            hi = (self.center + self.extent - origins) * inv
            # Parallel rays: containment along that axis decides hit/miss.
            parallel = np.abs(dirs) < 1e-15
            inside_axis = np.abs(origins - self.center) <= self.extent
            lo = np.where(parallel, np.where(inside_axis, -np.inf, np.inf), lo)
            hi = np.where(parallel, np.where(inside_axis, np.inf, -np.inf), hi)
            t1 = np.minimum(lo, hi)
            t2 = np.maximum(lo, hi)
            t_near = np.max(t1, axis=-1)
            t_far = np.min(t2, axis=-1)
            miss = t_far < t_near
        entry = np.where(t_near > eps, t_near, t_far)
        entry = np.where((entry > eps) & ~miss, entry, np.inf)
        return entry


@dataclass(eq=False)
class SyntheticScene:
    primitives: list[Primitive]
    background_color: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.background_color = np.asarray(self.background_color, dtype=np.float64).reshape(3)
        if not (0.0 < self.near < self.far):
            raise ValueError("scene requires 0 < near < far")
        if self.primitives and all(p.is_occluder for p in self.primitives):
            raise ValueError("scene must contain at least one non-occluder primitive")

    def active(self, include_occluders: bool) -> list[Primitive]:
        if include_occluders:
            return self.primitives
        return [p for p in self.primitives if not p.is_occluder]


@dataclass(eq=False)
class CameraRig:
    """Shared pinhole intrinsics plus per-view world-from-camera poses."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    poses: np.ndarray  # (V, 3, 4)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.poses.ndim != 3 or self.poses.shape[1:] != (3, 4):
            raise ValueError("poses must have shape (V, 3, 4)")
        for i, pose in enumerate(self.poses):
            r = pose[:, :3]
            if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
                raise ValueError(f"pose {i} rotation is not a proper rotation matrix")

    @property
    def num_views(self) -> int:
        return self.poses.shape[0]

    @property
    def intrinsics(self) -> tuple[float, float, float, float]:
        return (self.fx, self.fy, self.cx, self.cy)

    def rays(self, view_index: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= view_index < self.num_views:
            raise IndexError(f"view index {view_index} out of range [0, {self.num_views})")
        return pixel_rays(self.poses[view_index], self.intrinsics, self.width, self.height)


def scene_density_color(
    scene: SyntheticScene, points: np.ndarray, include_occluders: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Density and color of the frontmost-listed primitive containing each point.

    Points outside every (active) primitive get density 0 and the background
    color. Color is view-independent.
    """
    points = np.asarray(points, dtype=np.float64)
    base = points.shape[:-1]
    density = np.zeros(base, dtype=np.float64)
    color = np.broadcast_to(scene.background_color, base + (3,)).copy()
    unassigned = np.ones(base, dtype=bool)
    for prim in scene.active(include_occluders):
        hit = unassigned & prim.contains(points)
        if np.any(hit):
            density[hit] = prim.density
            color[hit] = prim.albedo
            unassigned &= ~hit
    return density, color


def sample_ray_depths(
    near: float,
    far: float,
    n_rays: int,
    n_samples: int,
    stratified: bool,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-ray sample depths on n_samples equal bins of [near, far].

    Deterministic mode samples each bin's lower edge, which makes the
    quadrature exact for densities that are constant over [near, far];
    stratified mode jitters uniformly inside each bin.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    width = (far - near) / n_samples
    edges = near + width * np.arange(n_samples, dtype=np.float64)
    depths = np.broadcast_to(edges, (n_rays, n_samples)).copy()
    if stratified:
        if rng is None:
            rng = np.random.default_rng()
        depths += width * rng.random((n_rays, n_samples))
    return depths


def composite(
    density: np.ndarray, color: np.ndarray, depths: np.ndarray, far: float
) -> tuple[np.ndarray, np.ndarray]:
    """Emission-absorption quadrature shared with the differentiable renderer.

    deltas are consecutive depth differences with the final one closing the
    interval at `far`. Returns (rgb, accumulated opacity); the caller blends
    the remaining transmittance with its own background.
    """
    deltas = np.diff(depths, axis=-1)
    deltas = np.concatenate([deltas, far - depths[:, -1:]], axis=-1)
    alpha = 1.0 - np.exp(-density * deltas)
    trans = np.cumprod(1.0 - alpha + 1e-12, axis=-1)
    trans = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=-1)
    weights = alpha * trans
    rgb = np.einsum("rn,rnc->rc", weights, color)
    return rgb, weights.sum(axis=-1)


def render_oracle(
    scene: SyntheticScene,
    rig: CameraRig,
    view_index: int,
    samples_per_ray: int,
    include_occluders: bool,
    stratified: bool = False,
    seed: int = 0,
) -> np.ndarray:
    """Reference H x W x 3 render of one view by per-ray quadrature."""
    origins, dirs = rig.rays(view_index)
    rng = np.random.default_rng(seed) if stratified else None
    depths = sample_ray_depths(
        scene.near, scene.far, origins.shape[0], samples_per_ray, stratified, rng
    )
    points = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    density, color = scene_density_color(scene, points, include_occluders)
    rgb, opacity = composite(density, color, depths, scene.far)
    rgb += (1.0 - opacity)[:, None] * scene.background_color
    return rgb.reshape(rig.height, rig.width, 3)


def first_hit(
    scene: SyntheticScene,
    origins: np.ndarray,
    dirs: np.ndarray,
    include_occluders: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """First surface crossing along each ray.

    Returns (t, prim_index) with t = inf and prim_index = -1 for misses.
    Ties resolve to the earlier-listed primitive.
    """
    indexed = [
        (i, p)
        for i, p in enumerate(scene.primitives)
        if include_occluders or not p.is_occluder
    ]
    n = origins.shape[0]
    if not indexed:
        return np.full(n, np.inf), np.full(n, -1, dtype=np.int64)
    entries = np.stack([p.ray_entry(origins, dirs) for _, p in indexed], axis=0)
    local = np.argmin(entries, axis=0)
    t = entries[local, np.arange(n)]
    index_map = np.array([i for i, _ in indexed], dtype=np.int64)
    prim_index = np.where(np.isfinite(t), index_map[local], -1)
    return t, prim_index


def occluder_mask(scene: SyntheticScene, rig: CameraRig, view_index: int) -> np.ndarray:
    """Binary H x W mask: 1 where the first surface hit is an occluder."""
    origins, dirs = rig.rays(view_index)
    _, prim_index = first_hit(scene, origins, dirs, include_occluders=True)
    flags = np.array([p.is_occluder for p in scene.primitives] + [False])
    mask = flags[prim_index]  # prim_index -1 maps to the appended False
    return mask.reshape(rig.height, rig.width).astype(np.uint8)


def pixel_visibility(scene: SyntheticScene, rig: CameraRig, reference_view: int) -> np.ndarray:
    """For each reference pixel, the number of views that see its surface point.

    The surface point is the first non-occluder hit along the reference ray.
    A view sees the point when the point projects inside its image, lies in
    front of it, and matches that view's own first hit (occluders included)
    to within VISIBILITY_DEPTH_TOL. Background pixels report the view count.
    """
    v_total = rig.num_views
    if v_total < 2:
        raise ValueError("pixel_visibility requires at least 2 views")
    origins, dirs = rig.rays(reference_view)
    t, _ = first_hit(scene, origins, dirs, include_occluders=False)
    surface = np.isfinite(t)
    points = origins[surface] + t[surface, None] * dirs[surface]

    counts_surface = np.zeros(points.shape[0], dtype=np.int64)
    for view in range(v_total):
        pose = rig.poses[view]
        uv, depth = project_points(points, pose, rig.intrinsics)
        in_front = depth > 1e-9
        in_image = (
            (uv[:, 0] >= -0.5)
            & (uv[:, 0] <= rig.width - 0.5)
            & (uv[:, 1] >= -0.5)
            & (uv[:, 1] <= rig.height - 0.5)
        )
        candidate = in_front & in_image
        if not np.any(candidate):
            continue
        center = camera_center(pose)
        vec = points[candidate] - center
        dist = np.linalg.norm(vec, axis=-1)
        ray_dirs = vec / dist[:, None]
        ray_origins = np.broadcast_to(center, ray_dirs.shape)
        t_hit, _ = first_hit(scene, ray_origins, ray_dirs, include_occluders=True)
        seen = np.abs(t_hit - dist) <= VISIBILITY_DEPTH_TOL
        counts_surface[candidate] += seen

    counts = np.full(origins.shape[0], v_total, dtype=np.int64)
    counts[surface] = np.maximum(counts_surface, 1)  # the reference always sees it
    return counts.reshape(rig.height, rig.width)


def perturb_poses(
    rig: CameraRig, rotation_noise_deg: float, translation_noise: float, seed: int
) -> CameraRig:
    """Rig with each pose rotated by exactly `rotation_noise_deg` about a random
    axis and its center shifted by exactly `translation_noise` in a random
    direction. Deterministic per seed; intrinsics untouched."""
    if rotation_noise_deg < 0 or translation_noise < 0:
        raise ValueError("noise magnitudes must be nonnegative")
    rng = np.random.default_rng(seed)
    angle = np.deg2rad(rotation_noise_deg)
    poses = rig.poses.copy()
    for i in range(rig.num_views):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        poses[i, :, :3] = rodrigues(axis * angle) @ poses[i, :, :3]
        poses[i, :, 3] = poses[i, :, 3] + translation_noise * direction
    return CameraRig(rig.fx, rig.fy, rig.cx, rig.cy, rig.width, rig.height, poses)


def scene_from_json(source) -> tuple[SyntheticScene, CameraRig, int]:
    """Parse a scene description (path, JSON string, or dict).

    Expected keys: primitives, background_color, near, far, cameras (3x4
    row-major matrices), intrinsics (fx, fy, cx, cy), resolution (W, H), seed.
    """
    if isinstance(source, dict):
        doc = source
    else:
        path = Path(source)
        if path.exists():
            doc = json.loads(path.read_text())
        else:
            doc = json.loads(str(source))
    prims = [
        Primitive(
            shape=p["shape"],
            center=p["center"],
            extent=p.get("extent", p.get("radius")),
            density=p["density"],
            albedo=p["albedo"],
            is_occluder=bool(p.get("is_occluder", False)),
        )
        for p in doc["primitives"]
    ]
    scene = SyntheticScene(
        primitives=prims,
        background_color=doc.get("background_color", (0.0, 0.0, 0.0)),
        near=float(doc["near"]),
        far=float(doc["far"]),
    )
    fx, fy, cx, cy = doc["intrinsics"]
    width, height = doc["resolution"]
    poses = np.asarray(doc["cameras"], dtype=np.float64).reshape(-1, 3, 4)
    rig = CameraRig(fx, fy, cx, cy, int(width), int(height), poses)
    return scene, rig, int(doc.get("seed", 0))


def scene_to_json(scene: SyntheticScene, rig: CameraRig, seed: int = 0) -> dict:
    return {
        "primitives": [
            {
                "shape": p.shape,
                "center": p.center.tolist(),
                "extent": p.extent.tolist(),
                "density": p.density,
                "albedo": p.albedo.tolist(),
                "is_occluder": p.is_occluder,
            }
            for p in scene.primitives
        ],
        "background_color": scene.background_color.tolist(),
        "near": scene.near,
        "far": scene.far,
        "intrinsics": list(rig.intrinsics),
        "resolution": [rig.width, rig.height],
        "cameras": [pose.tolist() for pose in rig.poses],
        "seed": seed,
    }


def sparse_point_cloud(
    scene: SyntheticScene, rig: CameraRig, stride: int = 4
) -> tuple[np.ndarray, list[list[tuple[int, tuple[float, float]]]]]:
    """Oracle stand-in for a structure-from-motion sparse reconstruction.

    Casts rays through every `stride`-th pixel of every view, keeps the first
    surface hits (occluders included; they are static geometry here), and
    records an observation in every view that sees each point.

    Returns (points (N, 3), observations) where observations[i] is a list of
    (view_index, (u, v)) pairs.
    """
    all_points = []
    for view in range(rig.num_views):
        origins, dirs = rig.rays(view)
        sel = np.zeros((rig.height, rig.width), dtype=bool)
        sel[::stride, ::stride] = True
        sel = sel.reshape(-1)
        t, _ = first_hit(scene, origins[sel], dirs[sel], include_occluders=True)
        hit = np.isfinite(t)
        all_points.append(origins[sel][hit] + t[hit, None] * dirs[sel][hit])
    points = np.concatenate(all_points, axis=0)

    observations: list[list[tuple[int, tuple[float, float]]]] = [[] for _ in range(points.shape[0])]
    for view in range(rig.num_views):
        pose = rig.poses[view]
        uv, depth = project_points(points, pose, rig.intrinsics)
        in_front = depth > 1e-9
        in_image = (
            (uv[:, 0] >= -0.5)
            & (uv[:, 0] <= rig.width - 0.5)
            & (uv[:, 1] >= -0.5)
            & (uv[:, 1] <= rig.height - 0.5)
        )
        candidate = np.flatnonzero(in_front & in_image)
        if candidate.size == 0:
            continue
        center = camera_center(pose)
        vec = points[candidate] - center
        dist = np.linalg.norm(vec, axis=-1)
        ray_dirs = vec / dist[:, None]
        t_hit, _ = first_hit(
            scene, np.broadcast_to(center, ray_dirs.shape), ray_dirs, include_occluders=True
        )
        seen = np.abs(t_hit - dist) <= VISIBILITY_DEPTH_TOL
        for idx, visible, (u, v) in zip(candidate, seen, uv[candidate]):
            if visible:
                observations[int(idx)].append((view, (float(u), float(v))))
    return points, observations
