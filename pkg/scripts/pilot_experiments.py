"""Pilot of the three end-to-end experiments; prints JSON lines with metrics."""

import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from scenes import (
    EXPERIMENT_HOLDOUT,
    experiment_scene,
    render_experiment_dataset,
)

from declutter.evaluation import psnr_masked
from declutter.field import sample_depths
from declutter.scene import occluder_mask, perturb_poses, render_oracle
from declutter.training import TrainConfig, render_view, train

torch.set_num_threads(1)

T = int(sys.argv[1]) if len(sys.argv) > 1 else 2500
B = int(sys.argv[2]) if len(sys.argv) > 2 else 1024

BASE = dict(
    total_iters=T, batch_size=B, samples_per_ray=32, mlp_depth=4, mlp_width=64,
    s3im_patch_side=16, s3im_window=4, seed=0, log_every=max(100, T // 20),
)

scene, rig = experiment_scene()
hold = EXPERIMENT_HOLDOUT
clean = render_oracle(scene, rig, hold, 256, include_occluders=False)
footprint = occluder_mask(scene, rig, hold)


def holdout_render(result, n=32):
    return render_view(result.field, rig.poses[hold], rig.intrinsics,
                       (rig.width, rig.height), scene.near, scene.far, n)


def near_density(result, n=32):
    import torch as th
    from declutter.geometry import pixel_rays
    o, d = pixel_rays(rig.poses[hold], rig.intrinsics, rig.width, rig.height)
    o, d = th.as_tensor(o, dtype=th.float32), th.as_tensor(d, dtype=th.float32)
    depths = sample_depths(scene.near, scene.far, o.shape[0], n, stratified=False)
    pts = o[:, None, :] + depths[..., None] * d[:, None, :]
    dirs = d[:, None, :].expand_as(pts)
    with th.no_grad():
        sigma, _ = result.field(pts.reshape(-1, 3), dirs.reshape(-1, 3))
    sigma = sigma.view(o.shape[0], n)
    k = int(np.ceil(0.2 * n))
    return float(sigma[:, :k].mean())


def log(tag, **kw):
    print(json.dumps({"tag": tag, **kw}), flush=True)


t0 = time.time()

# ---- experiment 6: occlusion removal, masked vs baked-in ----
ds_masked = render_experiment_dataset(scene, rig, masked=True)
ds_baked = render_experiment_dataset(scene, rig, masked=False)
res_m = train(TrainConfig(ablation_mode="+s3im", **BASE), ds_masked)
log("exp6_masked_done", minutes=(time.time() - t0) / 60)
res_b = train(TrainConfig(ablation_mode="+s3im", **BASE), ds_baked)
img_m, img_b = holdout_render(res_m), holdout_render(res_b)
inside = 1 - footprint
psnr_m = psnr_masked(img_m, clean, inside)
psnr_b = psnr_masked(img_b, clean, inside)
log("exp6", psnr_masked_run=psnr_m, psnr_baked_run=psnr_b, gap_db=psnr_m - psnr_b,
    minutes=(time.time() - t0) / 60)

# ---- experiment 7: pose recovery, mode (ii) ----
t0 = time.time()
scale = scene.far - scene.near
pert = perturb_poses(rig, 2.0, 0.02 * scale, seed=11)
ds_pose = render_experiment_dataset(scene, pert, masked=True, image_rig=rig)
train_views = ds_pose.train_indices


def pose_err(cams):
    rot, cen = cams.pose_errors(rig.poses)
    return float(np.mean(rot[train_views])), float(np.mean(cen[train_views]))


for lr_cam in (1e-3, 3e-3):
    res_p = train(TrainConfig(ablation_mode="+camera", lr_camera=lr_cam, **BASE), ds_pose)
    rot_after, cen_after = pose_err(res_p.cameras)
    rot0 = float(np.mean([np.deg2rad(2.0)] * len(train_views)))
    cen0 = 0.02 * scale
    log("exp7", lr_camera=lr_cam,
        rot_reduction=1 - rot_after / rot0, center_reduction=1 - cen_after / cen0,
        rot_after_deg=np.rad2deg(rot_after), cen_after=cen_after,
        minutes=(time.time() - t0) / 60)

# ---- experiment 8: OAR, modes (ii) vs (iii) on a starved volume ----
t0 = time.time()
ds_floater = render_experiment_dataset(scene, rig, masked=True, drop_views=(0,))
res_ii = train(TrainConfig(ablation_mode="+camera", **BASE), ds_floater)
res_iii = train(TrainConfig(ablation_mode="+oar", **BASE), ds_floater)
gt8 = np.asarray(ds_floater.images[hold])
mask8 = np.asarray(ds_floater.masks[hold])
d_ii, d_iii = near_density(res_ii), near_density(res_iii)
p_ii = psnr_masked(holdout_render(res_ii), gt8, mask8)
p_iii = psnr_masked(holdout_render(res_iii), gt8, mask8)
log("exp8", near_density_ii=d_ii, near_density_iii=d_iii, ratio=d_iii / max(d_ii, 1e-12),
    psnr_ii=p_ii, psnr_iii=p_iii, psnr_drop=p_ii - p_iii, minutes=(time.time() - t0) / 60)
