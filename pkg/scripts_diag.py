import os
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
import numpy as np
from camli.network import CamLiRAFT, ModelConfig, sequence_loss
from camli.synthdata import SceneSpec, generate_scene, rasterize_flow2d
from camli.training import AdamW, TrainConfig, branch_of, clip_gradients, cosine_factor, evaluate, zero_flow_baseline
from camli.tensor import Tape

spec = SceneSpec(seed=77, trans_range=0.8, rot_range=0.15)
train = [generate_scene(spec, i) for i in range(20)]
val = train[:8]  # fitting check: evaluate on training scenes
base = zero_flow_baseline(val)
print(f"train-subset baseline epe2d {base.epe2d:.3f} epe3d {base.epe3d:.3f}", flush=True)

cfg = ModelConfig(c2d=32, c3d=32, hidden=48, context=48, iters_train=4, iters_eval=8,
                  lookup_window=5, corr_channels=12)
model = CamLiRAFT(cfg, seed=0)
opt = AdamW(model.store.named(), 4e-4, 4e-3)
dense_cache = [rasterize_flow2d(f) for f in train]
rng = np.random.default_rng(1)

for step in range(800):
    i = int(rng.integers(0, len(train)))
    frame = train[i]
    dense, cover = dense_cache[i]
    model.store.zero_grad()
    with Tape() as tape:
        ests = model.forward(frame, iters=4)
        loss, l2, l3 = sequence_loss(ests, dense, cover, frame.flow3d, frame.occ)
        tape.backward(loss)
    g2 = np.sqrt(sum(float((p.grad.astype(np.float64)**2).sum()) for n,p in model.store.named() if branch_of(n)=="2d"))
    g3 = np.sqrt(sum(float((p.grad.astype(np.float64)**2).sum()) for n,p in model.store.named() if branch_of(n)=="3d"))
    clip_gradients(model.store, 1.0)
    opt.step(1.0)
    if step % 100 == 0:
        est = ests[-1]
        f2 = est.flow2d.data
        print(f"step {step}: l2 {l2:.3f} l3 {l3:.3f} |g2d| {g2:.2e} |g3d| {g3:.2e} "
              f"pred2d mean|f| {np.abs(f2).mean():.3f} max {np.abs(f2).max():.3f}", flush=True)

rep = evaluate(model, val)
print(f"fit-on-train epe2d {rep.epe2d:.3f} epe3d {rep.epe3d:.3f} (baseline {base.epe2d:.3f}/{base.epe3d:.3f})", flush=True)

# feature health
frame = train[0]
st = model.encode(frame)
v0 = st["pyr2"].levels[0].data
print("corr2 lvl0 std %.3f max %.2f" % (v0.std(), np.abs(v0).max()))
v3 = st["pyr3"].volumes[0].data
print("corr3 lvl0 std %.3f max %.2f" % (v3.std(), np.abs(v3).max()))
print("ctx2 std %.3f  h2 std %.3f" % (st["ctx2"].data.std(), st["h2"].data.std()))
