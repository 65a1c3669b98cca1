"""One instrumented run + error decomposition (scratch, not shipped)."""
import os, sys, time, json
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
import numpy as np
from camli.network import CamLiRAFT, ModelConfig
from camli.synthdata import SceneSpec, generate_scene, rasterize_flow2d
from camli.training import TrainConfig, train_loop, evaluate, zero_flow_baseline

out = sys.argv[1]
steps = int(sys.argv[2])
over = json.loads(sys.argv[3]) if len(sys.argv) > 3 else {}

spec = SceneSpec(seed=77, num_bodies=4, points_per_body=128, trans_range=0.6,
                 rot_range=0.1, depth_range=(4.0, 10.0), body_radius=(0.12, 0.24),
                 color_jitter=0.2)
train = [generate_scene(spec, i) for i in range(200)]
val = [generate_scene(spec, 1000 + i) for i in range(40)]
base = zero_flow_baseline(val)
print(f"baseline {base.epe2d:.3f}/{base.epe3d:.3f} targets {base.epe2d/2:.3f}/{base.epe3d/2:.3f}", flush=True)

mcfg = dict(c2d=32, c3d=32, hidden=48, context=48, iters_train=6, iters_eval=8,
            lookup_window=5, corr_channels=12)
mcfg.update(over.get("model", {}))
model = CamLiRAFT(ModelConfig(**mcfg), seed=0)
tc = TrainConfig(steps=steps, lr2d=4e-4, lr3d=4e-3, seed=0, eval_every=300,
                 augment_flips=True, warmup_steps=100)
t0 = time.time()
train_loop(model, train, val, tc, out)
print(f"train {time.time()-t0:.0f}s ({(time.time()-t0)/steps:.3f}s/step)", flush=True)
for r in open(os.path.join(out, "train_log.csv")).read().strip().splitlines()[1:]:
    p = r.split(",")
    if p[3]:
        print("eval@", p[0], p[3], p[4], flush=True)
rep1 = evaluate(model, val, iters=1)
rep8 = evaluate(model, val, iters=8)
print(f"@1 {rep1.epe2d:.4f}/{rep1.epe3d:.4f}  @8 {rep8.epe2d:.4f}/{rep8.epe3d:.4f}")

# error decomposition on 10 val scenes: coarse matching vs upsampling
err_coarse, err_up = [], []
for f in val[:10]:
    dense, cover = rasterize_flow2d(f)
    cov = cover > 0
    est = model.forward(f, iters=8)[-1]
    up = est.flow2d.data
    blocks = dense.reshape(2,8,8,8,8).transpose(0,1,3,2,4)
    cb = cover.reshape(8,8,8,8).transpose(0,2,1,3)
    cnt = cb.sum(axis=(2,3))
    gt_coarse = np.where(cnt[None]>0, (blocks*cb[None]).sum(axis=(3,4))/np.maximum(cnt[None],1), 0)
    pred_coarse = up.reshape(2,8,8,8,8).transpose(0,1,3,2,4).mean(axis=(3,4))
    err_coarse.append(np.sqrt(((pred_coarse-gt_coarse)**2).sum(axis=0))[cnt>0].mean())
    err_up.append(np.sqrt(((up-dense)**2).sum(axis=0))[cov].mean())
print(f"coarse-flow block error {np.mean(err_coarse):.3f}; full epe2d {np.mean(err_up):.3f}")
