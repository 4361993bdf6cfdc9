"""Learnable camera parameters, ray generation, and the delayed-start gate.

Focal lengths are shared across views and stored as log values so they stay
positive; rotations and translations are per-view residuals on fixed base
poses (the initial, possibly corrupted estimates). Before the gate iteration
the residuals are zero and the base poses are used verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


def exp_so3(axis_angle: torch.Tensor) -> torch.Tensor:
    """Rodrigues map from axis-angle vectors (..., 3) to rotation matrices.

    Near zero angle the sin/cos coefficients switch to their second-order
    series so the map stays differentiable and division-free at the origin.
    """
    theta_sq = (axis_angle * axis_angle).sum(dim=-1, keepdim=True)
    theta = torch.sqrt(theta_sq.clamp_min(1e-24))
    small = theta_sq < 1e-12
    # sin(t)/t and (1-cos t)/t^2, with Taylor fallbacks 1 - t^2/6, 1/2 - t^2/24
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / theta_sq.clamp_min(1e-24))

    zeros = torch.zeros_like(axis_angle[..., 0])
    wx, wy, wz = axis_angle[..., 0], axis_angle[..., 1], axis_angle[..., 2]
    k = torch.stack(
        [
            torch.stack([zeros, -wz, wy], dim=-1),
            torch.stack([wz, zeros, -wx], dim=-1),
            torch.stack([-wy, wx, zeros], dim=-1),
        ],
        dim=-2,
    )
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    eye = eye.expand(k.shape)
    return eye + a[..., None] * k + b[..., None] * (k @ k)


@dataclass(eq=False)
class RayBatch:
    origins: torch.Tensor  # (N, 3)
    directions: torch.Tensor  # (N, 3) unit vectors
    view_index: torch.Tensor  # (N,) long
    pixel_xy: torch.Tensor  # (N, 2) long
    gt_rgb: torch.Tensor  # (N, 3)

    def __len__(self) -> int:
        return self.origins.shape[0]


class CameraState(nn.Module):
    """Shared intrinsics plus per-view pose residuals with a trainability gate.

    Args:
        intrinsics: initial (fx, fy, cx, cy); cx, cy stay fixed.
        base_poses: (V, 3, 4) world-from-camera transforms.
        trainable_from: iteration index at which camera gradients switch on.
        tie_fy: learn a single log-focal and keep the initial fy/fx ratio.
    """

    def __init__(
        self,
        intrinsics,
        base_poses: np.ndarray,
        trainable_from: int = 0,
        tie_fy: bool = False,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        fx, fy, cx, cy = (float(v) for v in intrinsics)
        if fx <= 0 or fy <= 0:
            raise ValueError("focal lengths must be positive")
        base = torch.as_tensor(np.asarray(base_poses), dtype=dtype)
        if base.ndim != 3 or base.shape[1:] != (3, 4):
            raise ValueError("base_poses must have shape (V, 3, 4)")
        self.num_views = base.shape[0]
        self.cx = cx
        self.cy = cy
        self.trainable_from = int(trainable_from)
        self.tie_fy = tie_fy
        self._fy_ratio = fy / fx

        self.log_fx = nn.Parameter(torch.tensor(float(np.log(fx)), dtype=dtype))
        if tie_fy:
            self.register_parameter("log_fy", None)
        else:
            self.log_fy = nn.Parameter(torch.tensor(float(np.log(fy)), dtype=dtype))
        self.rotations = nn.Parameter(torch.zeros(self.num_views, 3, dtype=dtype))
        self.translations = nn.Parameter(torch.zeros(self.num_views, 3, dtype=dtype))
        self.register_buffer("base_rot", base[:, :, :3].clone())
        self.register_buffer("base_center", base[:, :, 3].clone())

    @property
    def fx(self) -> torch.Tensor:
        return torch.exp(self.log_fx)

    @property
    def fy(self) -> torch.Tensor:
        if self.tie_fy:
            return torch.exp(self.log_fx) * self._fy_ratio
        return torch.exp(self.log_fy)

    def effective_pose(self, view_index: int, train_camera: bool = True) -> torch.Tensor:
        """Current 3x4 pose of one view. With zero residuals (or with the gate
        closed) this is the base pose bit-for-bit."""
        if not 0 <= view_index < self.num_views:
            raise IndexError(f"view index {view_index} out of range")
        if not train_camera:
            return torch.cat(
                [self.base_rot[view_index], self.base_center[view_index, :, None]], dim=-1
            )
        rot = exp_so3(self.rotations[view_index]) @ self.base_rot[view_index]
        center = self.base_center[view_index] + self.translations[view_index]
        return torch.cat([rot, center[:, None]], dim=-1)

    def generate_rays(
        self,
        pixels: tuple[torch.Tensor, torch.Tensor],
        images: list,
        masks: list | None = None,
        train_camera: bool = True,
    ) -> RayBatch:
        """Pinhole rays through the given pixel centers.

        Args:
            pixels: (view_index (N,), pixel_xy (N, 2)) integer tensors.
            images: per-view (H, W, 3) arrays or tensors for ground truth.
            masks: optional per-view (H, W) arrays; any masked pixel in the
                request is rejected.
            train_camera: when False the base poses and detached focals are
                used, so no gradient reaches the camera parameters.
        """
        view_index, pixel_xy = pixels
        view_index = view_index.long()
        pixel_xy = pixel_xy.long()
        dtype = self.log_fx.dtype

        if masks is not None:
            for v in torch.unique(view_index).tolist():
                sel = view_index == v
                xy = pixel_xy[sel]
                mask = torch.as_tensor(np.asarray(masks[v]))
                if bool(mask[xy[:, 1], xy[:, 0]].any()):
                    raise ValueError(f"masked pixel passed to generate_rays for view {v}")

        fx, fy = self.fx, self.fy
        if not train_camera:
            fx, fy = fx.detach(), fy.detach()
        xy = pixel_xy.to(dtype)
        dirs_cam = torch.stack(
            [
                (xy[:, 0] - self.cx) / fx,
                (xy[:, 1] - self.cy) / fy,
                torch.ones_like(xy[:, 0]),
            ],
            dim=-1,
        )

        origins = torch.empty_like(dirs_cam)
        dirs = torch.empty_like(dirs_cam)
        gt = torch.empty_like(dirs_cam)
        for v in torch.unique(view_index).tolist():
            sel = view_index == v
            pose = self.effective_pose(v, train_camera=train_camera)
            dirs[sel] = dirs_cam[sel] @ pose[:, :3].T
            origins[sel] = pose[:, 3]
            img = torch.as_tensor(np.asarray(images[v]), dtype=dtype)
            xy_v = pixel_xy[sel]
            gt[sel] = img[xy_v[:, 1], xy_v[:, 0]]
        dirs = dirs / dirs.norm(dim=-1, keepdim=True)
        return RayBatch(origins, dirs, view_index, pixel_xy, gt)

    def pose_errors(self, reference_poses: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-view geodesic rotation error (radians) and center distance
        between current effective poses and a reference rig."""
        reference = np.asarray(reference_poses, dtype=np.float64)
        rot_err = np.empty(self.num_views)
        center_err = np.empty(self.num_views)
        with torch.no_grad():
            for v in range(self.num_views):
                pose = self.effective_pose(v).double().cpu().numpy()
                r_ref = reference[v, :, :3]
                cos_theta = (np.trace(pose[:, :3].T @ r_ref) - 1.0) / 2.0
                rot_err[v] = np.arccos(np.clip(cos_theta, -1.0, 1.0))
                center_err[v] = np.linalg.norm(pose[:, 3] - reference[v, :, 3])
        return rot_err, center_err


def camera_gate(t: int, state: CameraState) -> bool:
    """True once camera parameters may receive gradient (t >= trainable_from)."""
    if t < 0:
        raise ValueError("iteration index must be nonnegative")
    return t >= state.trainable_from
