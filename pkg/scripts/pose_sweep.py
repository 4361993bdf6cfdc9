import json, sys, time
from pathlib import Path
import numpy as np, torch
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from scenes import experiment_scene, render_experiment_dataset
from declutter.scene import perturb_poses
from declutter.training import TrainConfig, train

torch.set_num_threads(1)
T = 2500
scene, rig = experiment_scene()
scale = scene.far - scene.near
pert = perturb_poses(rig, 2.0, 0.02 * scale, seed=11)
ds = render_experiment_dataset(scene, pert, masked=True, image_rig=rig)
tv = ds.train_indices
rot0, cen0 = np.deg2rad(2.0), 0.02 * scale

variants = [
    dict(name="barf_tc0", t_c=0, t_freq_end=T//2, lr_camera=5e-3, lr_camera_final_scale=1.0),
    dict(name="tc10_freq50", t_c=T//10, t_freq_end=T//2, lr_camera=3e-3, lr_camera_final_scale=1.0),
    dict(name="default_nodecay", lr_camera=5e-3, lr_camera_final_scale=1.0),
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
                      "rot_red": 1 - float(np.mean(rot[tv])) / rot0,
                      "cen_red": 1 - float(np.mean(cen[tv])) / cen0,
                      "minutes": (time.time() - t0) / 60}), flush=True)
