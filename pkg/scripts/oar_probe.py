"""Probe of the occlusion-annealing experiment: which setup exhibits
near-camera fog in mode (ii), and what does the penalty cost in PSNR."""

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from scenes import EXPERIMENT_HOLDOUT, experiment_scene, render_experiment_dataset

from declutter.evaluation import psnr_masked
from declutter.field import sample_depths
from declutter.geometry import pixel_rays
from declutter.training import TrainConfig, render_view, train

torch.set_num_threads(1)
T = int(sys.argv[1]) if len(sys.argv) > 1 else 1500

scene, rig = experiment_scene()
ds = render_experiment_dataset(scene, rig, masked=True, drop_views=(0,))


def near_density(result, view, n=32):
    o, d = pixel_rays(rig.poses[view], rig.intrinsics, rig.width, rig.height)
    o, d = torch.as_tensor(o, dtype=torch.float32), torch.as_tensor(d, dtype=torch.float32)
    depths = sample_depths(scene.near, scene.far, o.shape[0], n, stratified=False)
    pts = o[:, None, :] + depths[..., None] * d[:, None, :]
    dirs = d[:, None, :].expand_as(pts)
    with torch.no_grad():
        sigma, _ = result.field(pts.reshape(-1, 3), dirs.reshape(-1, 3))
    k = math.ceil(0.2 * n)
    return float(sigma.view(o.shape[0], n)[:, :k].mean())


def holdout_psnr(result, view):
    img = render_view(result.field, rig.poses[view], rig.intrinsics,
                      (rig.width, rig.height), scene.near, scene.far, 32)
    return psnr_masked(img, np.asarray(ds.images[view]), np.asarray(ds.masks[view]))


variants = [
    dict(name="base64", mlp_depth=4, mlp_width=64),
    dict(name="base64_slowramp", mlp_depth=4, mlp_width=64, t_end=int(0.3 * T)),
    dict(name="wide96_slowramp", mlp_depth=4, mlp_width=96, t_end=int(0.3 * T)),
]
for v in variants:
    name = v.pop("name")
    t0 = time.time()
    out = {"variant": name, "T": T}
    for mode in ("+camera", "+oar"):
        cfg = TrainConfig(total_iters=T, batch_size=1024, samples_per_ray=32,
                          s3im_patch_side=16, s3im_window=4, seed=0, log_every=500,
                          ablation_mode=mode, **v)
        res = train(cfg, ds)
        tag = "ii" if mode == "+camera" else "iii"
        out[f"dens0_{tag}"] = round(near_density(res, 0), 6)
        out[f"dens8_{tag}"] = round(near_density(res, 8), 6)
        out[f"psnr8_{tag}"] = round(holdout_psnr(res, 8), 3)
    out["ratio0"] = round(out["dens0_iii"] / max(out["dens0_ii"], 1e-12), 4)
    out["ratio8"] = round(out["dens8_iii"] / max(out["dens8_ii"], 1e-12), 4)
    out["psnr_drop"] = round(out["psnr8_ii"] - out["psnr8_iii"], 3)
    out["minutes"] = round((time.time() - t0) / 60, 1)
    print(json.dumps(out), flush=True)
