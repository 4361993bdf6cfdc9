"""Second-round pose-recovery sweep: stable learning rates, schedule variants."""

import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from scenes import experiment_scene, render_experiment_dataset

from declutter.scene import perturb_poses
from declutter.training import TrainConfig, train

torch.set_num_threads(1)
T = int(sys.argv[1]) if len(sys.argv) > 1 else 2500

scene, rig = experiment_scene()
scale = scene.far - scene.near
pert = perturb_poses(rig, 2.0, 0.02 * scale, seed=11)
ds = render_experiment_dataset(scene, pert, masked=True, image_rig=rig)
tv = ds.train_indices
rot0, cen0 = np.deg2rad(2.0), 0.02 * scale

variants = [
    dict(name="default_lr1e-3_nodecay", lr_camera=1e-3, lr_camera_final_scale=1.0),
    dict(name="barfish_tc10_freq50_decay", t_c=T // 10, t_freq_end=T // 2, lr_camera=1e-3),
    dict(name="freq50_default_tc", t_freq_end=T // 2, lr_camera=1e-3),
    dict(name="default_lr5e-4", lr_camera=5e-4),
]
for v in variants:
    name = v.pop("name")
    t0 = time.time()
    cfg = TrainConfig(total_iters=T, batch_size=1024, samples_per_ray=32, mlp_depth=4,
                      mlp_width=64, s3im_patch_side=16, s3im_window=4, seed=0,
                      log_every=500, ablation_mode="+camera", **v)
    res = train(cfg, ds)
    rot, cen = res.cameras.pose_errors(rig.poses)
    print(json.dumps({"variant": name,
                      "rot_red": round(1 - float(np.mean(rot[tv])) / rot0, 4),
                      "cen_red": round(1 - float(np.mean(cen[tv])) / cen0, 4),
                      "minutes": round((time.time() - t0) / 60, 1)}), flush=True)
