"""Shared numpy camera geometry: rotations, pinhole projection, pose construction.

Pose convention throughout the package: a pose is a 3x4 world-from-camera
transform [R | t] with camera axes x-right, y-down, z-forward. The camera
center in world coordinates is the translation column t.
"""

from __future__ import annotations

import numpy as np


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Rotation matrix from an axis-angle 3-vector (angle = vector norm, radians)."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = float(np.linalg.norm(v))
    if theta < 1e-12:
        return np.eye(3)
    axis = v / theta
    kx, ky, kz = axis
    k = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def geodesic_angle(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic distance in radians between two rotation matrices."""
    cos_theta = (np.trace(r_a.T @ r_b) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos_theta, -1.0, 1.0)))


def look_at_pose(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera 3x4 pose for a camera at `eye` looking at `target`.

    `up` is the world up direction; the camera y axis points against it
    (y-down convention).
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    z = z / np.linalg.norm(z)
    y = -(up - np.dot(up, z) * z)
    norm_y = np.linalg.norm(y)
    if norm_y < 1e-9:
        raise ValueError("look direction is parallel to the up vector")
    y = y / norm_y
    x = np.cross(y, z)
    pose = np.empty((3, 4), dtype=np.float64)
    pose[:, 0] = x
    pose[:, 1] = y
    pose[:, 2] = z
    pose[:, 3] = eye
    return pose


def camera_center(pose: np.ndarray) -> np.ndarray:
    return np.asarray(pose, dtype=np.float64)[:, 3].copy()


def project_points(points: np.ndarray, pose: np.ndarray, intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project world points into a view.

    Args:
        points: (N, 3) world coordinates.
        pose: 3x4 world-from-camera transform.
        intrinsics: (fx, fy, cx, cy) in pixels.

    Returns:
        (uv, depth): (N, 2) pixel coordinates and (N,) camera-frame z.
        Points behind the camera have depth <= 0; their uv is still computed
        from the (meaningless) projective division and should be ignored.
    """
    fx, fy, cx, cy = intrinsics
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    r = pose[:, :3]
    t = pose[:, 3]
    cam = (pts - t) @ r  # R^T (p - t), via (p-t) @ R
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * cam[:, 0] / z + cx
        v = fy * cam[:, 1] / z + cy
    return np.stack([u, v], axis=-1), z


def unproject_pixels(uv: np.ndarray, depth: np.ndarray, pose: np.ndarray, intrinsics) -> np.ndarray:
    """Inverse of project_points at a known camera-frame depth."""
    fx, fy, cx, cy = intrinsics
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    cam = np.stack(
        [
            (uv[:, 0] - cx) / fx * depth,
            (uv[:, 1] - cy) / fy * depth,
            depth,
        ],
        axis=-1,
    )
    r = pose[:, :3]
    t = pose[:, 3]
    return cam @ r.T + t


def pixel_rays(pose: np.ndarray, intrinsics, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-direction rays through every integer pixel coordinate of a view.

    Returns (origins, directions), each (H*W, 3), in scanline (row-major) order.
    """
    fx, fy, cx, cy = intrinsics
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    u, v = np.meshgrid(xs, ys)  # (H, W)
    dirs_cam = np.stack(
        [(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1
    ).reshape(-1, 3)
    r = pose[:, :3]
    dirs = dirs_cam @ r.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose[:, 3], dirs.shape).copy()
    return origins, dirs
