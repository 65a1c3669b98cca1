"""Training loop: decoupled-weight-decay Adam with per-branch learning
rates, cosine decay, gradient clipping, CSV metric logging, and bitwise
resumable checkpoints."""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .metrics import MetricReport, compute_metrics
from .network import CamLiRAFT, ModelConfig, sequence_loss
from .params import ParamStore
from .serialization import load_tensor, save_tensor
from .synthdata import rasterize_flow2d
from .tensor import ContractError, Tape


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 1000
    lr2d: float = 2e-4
    lr3d: float = 2e-3
    weight_decay: float = 1e-6
    clip: float = 1.0
    alpha: float = 0.8
    respect_occlusion: bool = False
    eval_every: int = 0          # 0: evaluate only at the end
    seed: int = 0                # data-order seed
    depth_limit: float = 35.0
    augment_flips: bool = False  # expand the train set with x/y mirrors
    warmup_steps: int = 0        # linear LR ramp before the cosine decay

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def branch_of(name):
    """Which loss trains this parameter under gradient detaching."""
    return "2d" if name.startswith("img.") or ".to2d." in name else "3d"


def cosine_factor(step, total_steps):
    t = min(max(step, 0), total_steps)
    return 0.5 * (1.0 + np.cos(np.pi * t / max(total_steps, 1)))


class AdamW:
    """Adam with decoupled weight decay and per-branch base learning rates."""

    def __init__(self, named_params, lr2d, lr3d, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-6):
        self.named = list(named_params)
        self.lr = {"2d": lr2d, "3d": lr3d}
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}

    def step(self, lr_scale=1.0):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.named:
            g = p.grad
            lr = self.lr[branch_of(name)] * lr_scale
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * update + lr * self.wd * p.data).astype(p.data.dtype)


def clip_gradients(store, max_norm):
    """Clip each branch's gradient norm separately: the image branch's
    gradients run an order of magnitude larger than the point branch's, and
    a global clip would starve the smaller one."""
    norms = {}
    for side in ("2d", "3d"):
        total = 0.0
        for name, p in store.named():
            if branch_of(name) == side:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        norm = np.sqrt(total)
        norms[side] = norm
        if norm > max_norm > 0:
            scale = max_norm / (norm + 1e-12)
            for name, p in store.named():
                if branch_of(name) == side:
                    p.grad *= scale
    return norms


# ---------------------------------------------------------------------------
# evaluation

def combine_reports(reports):
    """Pooled metrics: fields are count-weighted means of the per-scene ones."""
    if not reports:
        raise ContractError("combine_reports: nothing to combine")
    n2 = sum(r.count_2d for r in reports)
    n3 = sum(r.count_3d for r in reports)
    w2 = [r.count_2d / n2 for r in reports]
    w3 = [r.count_3d / n3 for r in reports]
    return MetricReport(
        epe2d=sum(r.epe2d * w for r, w in zip(reports, w2)),
        acc1px=sum(r.acc1px * w for r, w in zip(reports, w2)),
        epe3d=sum(r.epe3d * w for r, w in zip(reports, w3)),
        acc05=sum(r.acc05 * w for r, w in zip(reports, w3)),
        acc_s=sum(r.acc_s * w for r, w in zip(reports, w3)),
        acc_r=sum(r.acc_r * w for r, w in zip(reports, w3)),
        outliers=sum(r.outliers * w for r, w in zip(reports, w3)),
        count_2d=n2, count_3d=n3)


def frame_masks(frame, depth_limit=35.0):
    """Evaluation masks: covered pixels for 2D, depth-limited points for 3D."""
    dense, cover = rasterize_flow2d(frame)
    mask3 = frame.points1[:, 2] < depth_limit
    return dense, cover, mask3


def evaluate_frame(model, frame, iters=None, depth_limit=35.0):
    iters = model.config.iters_eval if iters is None else iters
    est = model.forward(frame, iters=iters)[-1]
    dense, cover, mask3 = frame_masks(frame, depth_limit)
    return compute_metrics(est.flow2d.data, dense, cover, est.flow3d.data, frame.flow3d, mask3)


def evaluate(model, frames, iters=None, depth_limit=35.0):
    return combine_reports([evaluate_frame(model, f, iters, depth_limit) for f in frames])


def zero_flow_baseline(frames, depth_limit=35.0):
    """Metrics of the all-zero prediction; the reference training must beat."""
    reports = []
    for f in frames:
        dense, cover, mask3 = frame_masks(f, depth_limit)
        reports.append(compute_metrics(
            np.zeros_like(dense), dense, cover,
            np.zeros_like(f.flow3d), f.flow3d, mask3))
    return combine_reports(reports)


# ---------------------------------------------------------------------------
# checkpoints

CSV_HEADER = "step,loss2d,loss3d,epe2d,epe3d"


def _rng_state_to_json(gen):
    st = gen.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": {k: np.asarray(v).tolist() if isinstance(v, np.ndarray) else int(v)
                  for k, v in st["state"].items()},
        "buffer": np.asarray(st["buffer"]).tolist(),
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def _rng_state_from_json(d):
    gen = np.random.Generator(np.random.Philox())
    st = gen.bit_generator.state
    st["state"] = {k: (np.array(v, dtype=np.uint64) if isinstance(v, list) else int(v))
                   for k, v in d["state"].items()}
    st["buffer"] = np.array(d["buffer"], dtype=np.uint64)
    st["buffer_pos"] = d["buffer_pos"]
    st["has_uint32"] = d["has_uint32"]
    st["uinteger"] = d["uinteger"]
    gen.bit_generator.state = st
    return gen


def save_checkpoint(path, model, step, opt=None, order_rng=None, train_cfg=None):
    os.makedirs(path, exist_ok=True)
    pdir = os.path.join(path, "params")
    os.makedirs(pdir, exist_ok=True)
    for name, p in model.store.named():
        save_tensor(os.path.join(pdir, name + ".ten"), p.data)
    manifest = {
        "format": 1,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "step": int(step),
    }
    if train_cfg is not None:
        manifest["train_config"] = asdict(train_cfg)
    if opt is not None:
        odir = os.path.join(path, "opt")
        os.makedirs(odir, exist_ok=True)
        for name in sorted(opt.m):
            save_tensor(os.path.join(odir, name + ".m.ten"), opt.m[name])
            save_tensor(os.path.join(odir, name + ".v.ten"), opt.v[name])
        manifest["optimizer_t"] = opt.t
    if order_rng is not None:
        manifest["order_rng"] = _rng_state_to_json(order_rng)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def read_manifest(path):
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise ContractError(f"{path}: not a checkpoint (missing manifest.json)")
    with open(mpath) as fh:
        return json.load(fh)


def load_model(path):
    """Rebuild the model from a checkpoint directory."""
    manifest = read_manifest(path)
    if manifest.get("format") != 1:
        raise ContractError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    config = ModelConfig.from_dict(manifest["config"])
    model = CamLiRAFT(config, seed=manifest["seed"])
    pdir = os.path.join(path, "params")
    state = {}
    for name, _ in model.store.named():
        fpath = os.path.join(pdir, name + ".ten")
        if not os.path.exists(fpath):
            raise ContractError(f"{path}: checkpoint is missing parameter {name!r}")
        state[name] = load_tensor(fpath)
    model.store.load_state(state)
    return model, manifest


# ---------------------------------------------------------------------------
# the loop

def train_loop(model, train_frames, val_frames, tcfg, out_dir, resume=False, stop_at=None):
    """Seeded training; returns the final validation report (or None).

    Writes a checkpoint plus a CSV log (step,loss2d,loss3d,epe2d,epe3d) to
    out_dir. tcfg.steps is the full schedule horizon; stop_at checkpoints
    early, and resume=True continues in-place, reproducing the
    uninterrupted run bitwise.
    """
    if not train_frames:
        raise ContractError("train_loop: empty dataset")
    if tcfg.augment_flips:
        from .synthdata import flip_frame
        train_frames = [flip_frame(f, fx, fy) for f in train_frames
                        for fx in (False, True) for fy in (False, True)]
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.csv")
    stop_at = tcfg.steps if stop_at is None else min(stop_at, tcfg.steps)

    opt = AdamW(model.store.named(), tcfg.lr2d, tcfg.lr3d, weight_decay=tcfg.weight_decay)
    start_step = 0
    if resume:
        manifest = read_manifest(out_dir)
        loaded, _ = load_model(out_dir)
        model.store.load_state(loaded.store.state())
        odir = os.path.join(out_dir, "opt")
        for name in opt.m:
            opt.m[name] = load_tensor(os.path.join(odir, name + ".m.ten")).astype(np.float32)
            opt.v[name] = load_tensor(os.path.join(odir, name + ".v.ten")).astype(np.float32)
        opt.t = manifest["optimizer_t"]
        order_rng = _rng_state_from_json(manifest["order_rng"])
        start_step = manifest["step"]
        rows = []
    else:
        order_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([tcfg.seed, 7])))
        rows = [CSV_HEADER]

    dense_cache = [rasterize_flow2d(f) for f in train_frames]
    report = None
    for step in range(start_step, stop_at):
        idx = int(order_rng.integers(0, len(train_frames)))
        frame = train_frames[idx]
        dense, cover = dense_cache[idx]
        model.store.zero_grad()
        with Tape() as tape:
            ests = model.forward(frame, iters=model.config.iters_train)
            # supervise covered pixels; the static background would swamp
            # the loss with easy zeros otherwise
            loss, l2, l3 = sequence_loss(
                ests, dense, cover, frame.flow3d, frame.occ,
                alpha=tcfg.alpha, respect_occlusion=tcfg.respect_occlusion)
            if not np.isfinite(loss.data).all():
                raise TrainingDiverged(f"loss became non-finite at step {step}")
            tape.backward(loss)
        clip_gradients(model.store, tcfg.clip)
        lr_factor = cosine_factor(step, tcfg.steps)
        if tcfg.warmup_steps > 0:
            lr_factor *= min(1.0, (step + 1) / tcfg.warmup_steps)
        opt.step(lr_factor)

        epe2 = epe3 = ""
        if val_frames and tcfg.eval_every and (step + 1) % tcfg.eval_every == 0:
            report = evaluate(model, val_frames)
            epe2, epe3 = f"{report.epe2d:.6f}", f"{report.epe3d:.6f}"
        rows.append(f"{step},{l2:.6f},{l3:.6f},{epe2},{epe3}")

    if val_frames and stop_at == tcfg.steps:
        report = evaluate(model, val_frames)
        rows.append(f"{stop_at},,,{report.epe2d:.6f},{report.epe3d:.6f}")

    mode = "a" if resume else "w"
    with open(log_path, mode) as fh:
        for r in rows:
            fh.write(r + "\n")
    save_checkpoint(out_dir, model, stop_at, opt=opt, order_rng=order_rng, train_cfg=tcfg)
    return report
