"""Calibration for the toy-training criterion (scratch, not shipped)."""
import os, sys, time, json
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
import numpy as np
from camli.network import CamLiRAFT, ModelConfig
from camli.synthdata import SceneSpec, generate_scene
from camli.training import TrainConfig, train_loop, evaluate, zero_flow_baseline
import tempfile

cfg_json = json.loads(sys.argv[1]) if len(sys.argv) > 1 else {}
steps = cfg_json.pop("steps", 1000)
lr2d = cfg_json.pop("lr2d", 4e-4)
lr3d = cfg_json.pop("lr3d", 4e-3)
scene_over = cfg_json.pop("scene", {})
model_over = cfg_json.pop("model", {})
direction = cfg_json.pop("direction", "both")
n_train = cfg_json.pop("n_train", 200)

t0 = time.time()
spec = SceneSpec(seed=77, num_bodies=4, points_per_body=128, trans_range=0.6,
                 rot_range=0.1, depth_range=(4.0, 10.0), body_radius=(0.12, 0.24),
                 color_jitter=0.2, **scene_over)
train_frames = [generate_scene(spec, i) for i in range(n_train)]
val_frames = [generate_scene(spec, 1000 + i) for i in range(40)]
print(f"datagen {time.time()-t0:.0f}s  cover~{(np.count_nonzero(train_frames[0].occ==0))}", flush=True)

base = zero_flow_baseline(val_frames)
print(f"baseline: epe2d {base.epe2d:.4f} epe3d {base.epe3d:.4f}; targets {base.epe2d/2:.3f}/{base.epe3d/2:.3f}", flush=True)

mcfg = dict(c2d=32, c3d=32, hidden=32, context=32, iters_train=3, iters_eval=8,
            lookup_window=5, corr_channels=12, fusion_direction=direction)
mcfg.update(model_over)
cfg = ModelConfig(**mcfg)
model = CamLiRAFT(cfg, seed=0)
tc = TrainConfig(steps=steps, lr2d=lr2d, lr3d=lr3d, seed=0, eval_every=200, augment_flips=True)
t0 = time.time()
with tempfile.TemporaryDirectory() as d:
    train_loop(model, train_frames, val_frames, tc, d)
    rows = open(os.path.join(d, "train_log.csv")).read().strip().splitlines()
    for r in rows[1:]:
        p = r.split(",")
        if p[3]:
            print("eval@", p[0], "epe2d", p[3], "epe3d", p[4], flush=True)
    tr = [(float(p[1]) + float(p[2])) for p in (r.split(",") for r in rows[1:]) if p[1]]
    print(f"train loss first10 {np.mean(tr[:10]):.3f} last50 {np.mean(tr[-50:]):.3f}", flush=True)
print(f"train {time.time()-t0:.0f}s ({(time.time()-t0)/steps:.3f}s/step)", flush=True)
rep1 = evaluate(model, val_frames, iters=1)
rep8 = evaluate(model, val_frames, iters=8)
print(f"iters=1: epe2d {rep1.epe2d:.4f} epe3d {rep1.epe3d:.4f}")
print(f"iters=8: epe2d {rep8.epe2d:.4f} epe3d {rep8.epe3d:.4f}")
