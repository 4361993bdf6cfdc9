import json, sys, time
from pathlib import Path
import numpy as np, torch
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from scenes import experiment_scene, render_experiment_dataset
from declutter.scene import perturb_poses
from declutter.training import TrainConfig, train
from declutter.geometry import geodesic_angle
from scipy.spatial.transform import Rotation as R

torch.set_num_threads(1)
T = int(sys.argv[1]); seed_pert = int(sys.argv[2]); lr_cam = float(sys.argv[3])
batch = int(sys.argv[4]) if len(sys.argv) > 4 else 1024

scene, rig = experiment_scene()
scale = scene.far - scene.near
pert = perturb_poses(rig, 2.0, 0.02 * scale, seed=seed_pert)
ds = render_experiment_dataset(scene, pert, masked=True, image_rig=rig)
tv = ds.train_indices

cfg = TrainConfig(total_iters=T, batch_size=batch, samples_per_ray=32, mlp_depth=4,
                  mlp_width=64, s3im_patch_side=16, s3im_window=4, seed=0,
                  log_every=max(200, T//10), ablation_mode="+camera", lr_camera=lr_cam)
t0 = time.time()
res = train(cfg, ds)
rot, cen = res.cameras.pose_errors(rig.poses)
eff = [res.cameras.effective_pose(v).detach().double().numpy() for v in tv]
Ns = [e[:, :3] @ rig.poses[v, :, :3].T for e, v in zip(eff, tv)]
vecs = np.stack([R.from_matrix(n).as_rotvec() for n in Ns])
G = R.from_rotvec(vecs.mean(axis=0)).as_matrix()
rel_rot = float(np.mean([np.rad2deg(geodesic_angle(G, n)) for n in Ns]))
dts = np.stack([e[:, 3] - rig.poses[v, :, 3] for e, v in zip(eff, tv)])
rel_cen = float(np.linalg.norm(dts - dts.mean(axis=0), axis=1).mean())
print(json.dumps({
    "T": T, "seed_pert": seed_pert, "lr_cam": lr_cam, "batch": batch,
    "rot_red": round(1 - float(np.mean(rot[tv])) / np.deg2rad(2.0), 4),
    "cen_red": round(1 - float(np.mean(cen[tv])) / (0.02 * scale), 4),
    "rel_rot_deg": round(rel_rot, 3), "rel_cen": round(rel_cen, 4),
    "gauge_rot_deg": round(float(np.rad2deg(np.linalg.norm(vecs.mean(axis=0)))), 3),
    "gauge_cen": round(float(np.linalg.norm(dts.mean(axis=0))), 4),
    "minutes": round((time.time() - t0) / 60, 1)}), flush=True)
