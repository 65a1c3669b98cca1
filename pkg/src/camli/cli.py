"""Command-line entry point.

Exit codes: 0 ok, 1 gradcheck failure, 2 bad input, 3 training divergence,
4 checkpoint/config mismatch. Every command is deterministic given --seed
and writes only under its --out directory. CAMLI_THREADS caps the scene
generation worker pool.
"""

import os

# Cap numeric-library threads before numpy loads; CAMLI_THREADS also sizes
# the data-generation worker pool.
_THREADS = os.environ.get("CAMLI_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse
import dataclasses
import hashlib
import json
import sys

import numpy as np

from .metrics import compute_metrics
from .network import CamLiRAFT, ModelConfig, FUSION_SITES
from .ops_registry import run_op
from .serialization import SerializationError, load_tensor, save_tensor
from .synthdata import (DatasetError, SceneSpec, SpecError, generate_scene,
                        read_dataset, write_dataset)
from .tensor import ContractError
from .training import (TrainConfig, TrainingDiverged, evaluate, frame_masks,
                       load_model, train_loop)

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_BAD_INPUT = 2
EXIT_DIVERGED = 3
EXIT_CONFIG_MISMATCH = 4


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise SpecError(f"{path}: no such file")
    except json.JSONDecodeError as e:
        raise SpecError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}")


def _dataset_checksum(root):
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fn in sorted(filenames):
            path = os.path.join(dirpath, fn)
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def _workers():
    try:
        return max(1, int(os.environ.get("CAMLI_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------

def cmd_gen(args):
    spec_dict = _load_json(args.spec) if args.spec else {}
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SceneSpec.from_dict(spec_dict)
    n = args.scenes
    workers = _workers()
    if workers > 1 and n > 1:
        from multiprocessing import Pool
        with Pool(workers) as pool:
            frames = pool.starmap(generate_scene, [(spec, i) for i in range(n)])
    else:
        frames = [generate_scene(spec, i) for i in range(n)]
    write_dataset(args.out, spec, frames)
    checksum = _dataset_checksum(args.out)
    print(f"wrote {n} scenes to {args.out}")
    print(f"checksum {checksum}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_json(args.config) if args.config else {}
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise SpecError(f"config: unknown sections {sorted(unknown)}")
    model_cfg = dict(cfg.get("model", {}))
    train_cfg = dict(cfg.get("train", {}))
    for flag in ("steps", "seed", "lr2d", "lr3d", "eval_every"):
        v = getattr(args, flag)
        if v is not None:
            train_cfg[flag] = v
    model_seed = args.model_seed if args.model_seed is not None else train_cfg.get("seed", 0)
    tcfg = TrainConfig.from_dict(train_cfg)

    spec, frames = read_dataset(args.data)
    holdout = args.val_scenes if args.val_scenes is not None else max(1, len(frames) // 6)
    holdout = min(holdout, max(0, len(frames) - 1))
    train_frames = frames[:len(frames) - holdout] if holdout else frames
    val_frames = frames[len(frames) - holdout:] if holdout else []

    if args.resume:
        model, manifest = load_model(args.out)
        tcfg = TrainConfig.from_dict(manifest.get("train_config", dataclasses.asdict(tcfg)))
        if args.steps is not None:
            tcfg.steps = args.steps
    else:
        mc = dict(model_cfg)
        mc.setdefault("image_size", spec.image_size)
        mc.setdefault("num_points", spec.num_points)
        model = CamLiRAFT(ModelConfig.from_dict(mc), seed=model_seed)
    _check_data_compat(model, spec)

    report = train_loop(model, train_frames, val_frames, tcfg, args.out,
                        resume=args.resume, stop_at=args.stop_at)
    if report is not None:
        print(f"final val: epe2d={report.epe2d:.4f} epe3d={report.epe3d:.4f}")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def _check_data_compat(model, spec):
    if tuple(model.config.image_size) != tuple(spec.image_size):
        raise ConfigMismatch(
            f"model image size {model.config.image_size} != dataset {spec.image_size}")
    if model.config.num_points != spec.num_points:
        raise ConfigMismatch(
            f"model expects {model.config.num_points} points, dataset has {spec.num_points}")


class ConfigMismatch(RuntimeError):
    pass


def _print_report(label, report):
    print(f"{label:24s} {report.row()}")


def cmd_eval(args):
    if not args.gt_as_pred and not args.ckpt:
        raise SpecError("--ckpt is required unless --gt-as-pred is set")
    spec, frames = read_dataset(args.data)
    results = {}

    if args.gt_as_pred:
        from .training import combine_reports
        reports = []
        for f in frames:
            dense, cover, mask3 = frame_masks(f)
            reports.append(compute_metrics(dense, dense, cover, f.flow3d, f.flow3d, mask3))
        rep = combine_reports(reports)
        _print_report("gt-as-prediction", rep)
        results["gt_as_prediction"] = json.loads(rep.to_json())
    else:
        model, _ = load_model(args.ckpt)
        _check_data_compat(model, spec)
        iters = args.iters or model.config.iters_eval

        if args.ablate == "direction":
            base = model.config.fusion_direction
            for direction in ("none", "2d_to_3d", "3d_to_2d", "both"):
                model.config = dataclasses.replace(model.config, fusion_direction=direction)
                rep = evaluate(model, frames, iters=iters)
                _print_report(f"direction={direction}", rep)
                results[f"direction={direction}"] = json.loads(rep.to_json())
            model.config = dataclasses.replace(model.config, fusion_direction=base)
        elif args.ablate == "fusion_sites":
            base = model.config.fusion_sites
            subsets = [()]
            for i in range(len(FUSION_SITES)):
                subsets.append(tuple(FUSION_SITES[:i + 1]))
            for subset in subsets:
                model.config = dataclasses.replace(model.config, fusion_sites=subset)
                label = "+".join(subset) if subset else "(no fusion)"
                rep = evaluate(model, frames, iters=iters)
                _print_report(f"sites={label}", rep)
                results[f"sites={label}"] = json.loads(rep.to_json())
            model.config = dataclasses.replace(model.config, fusion_sites=base)
        else:
            rep = evaluate(model, frames, iters=iters)
            _print_report(f"iters={iters}", rep)
            results["report"] = json.loads(rep.to_json())
            if args.dump_flows:
                os.makedirs(args.dump_flows, exist_ok=True)
                for i, f in enumerate(frames):
                    est = model.forward(f, iters=iters)[-1]
                    save_tensor(os.path.join(args.dump_flows, f"flow2d_{i:04d}.ten"), est.flow2d.data)
                    save_tensor(os.path.join(args.dump_flows, f"flow3d_{i:04d}.ten"), est.flow3d.data)

    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return EXIT_OK


def cmd_gradcheck(args):
    from .checks import run_suites
    names = ["all"] if args.module == "all" else [args.module]
    results = run_suites(names, tol=args.tol)
    worst = 0.0
    failed = 0
    for suite, case, rep in results:
        status = "PASS" if rep.passed else "FAIL"
        print(f"[{status}] {suite:24s} {case:28s} max_rel_err={rep.max_rel_err:.3e}")
        worst = max(worst, rep.max_rel_err)
        failed += 0 if rep.passed else 1
    print(f"{len(results)} checks, {failed} failures, worst rel err {worst:.3e}")
    return EXIT_OK if failed == 0 else EXIT_GRADCHECK


def cmd_op(args):
    arrays = [load_tensor(p) for p in args.inputs]
    op_args = json.loads(args.args) if args.args else {}
    outputs = run_op(args.name, arrays, op_args)
    if len(outputs) != len(args.outputs):
        raise ContractError(
            f"op {args.name} produced {len(outputs)} arrays, {len(args.outputs)} paths given")
    for path, arr in zip(args.outputs, outputs):
        save_tensor(path, arr)
    return EXIT_OK


def cmd_infer(args):
    model, _ = load_model(args.ckpt)
    spec, frames = read_dataset(args.data)
    _check_data_compat(model, spec)
    if not 0 <= args.scene < len(frames):
        raise SpecError(f"scene index {args.scene} out of range [0, {len(frames)})")
    iters = model.config.iters_eval if args.iters is None else args.iters
    os.makedirs(args.out, exist_ok=True)
    if iters == 0:
        h, w = model.config.image_size
        flow2d = np.zeros((2, h, w), dtype=np.float32)
        flow3d = np.zeros((model.config.num_points, 3), dtype=np.float32)
    else:
        est = model.forward(frames[args.scene], iters=iters)[-1]
        flow2d, flow3d = est.flow2d.data, est.flow3d.data
    save_tensor(os.path.join(args.out, "flow2d.ten"), flow2d)
    save_tensor(os.path.join(args.out, "flow3d.ten"), flow3d)
    print(f"wrote flows for scene {args.scene} to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="camli",
                                description="camera-LiDAR fusion flow estimation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", help="scene spec JSON file")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=1)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON config with 'model' and 'train' sections")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--stop-at", type=int, default=None, dest="stop_at")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--model-seed", type=int, default=None)
    t.add_argument("--lr2d", type=float, default=None)
    t.add_argument("--lr3d", type=float, default=None)
    t.add_argument("--eval-every", type=int, default=None, dest="eval_every")
    t.add_argument("--val-scenes", type=int, default=None, dest="val_scenes")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--iters", type=int, default=None)
    e.add_argument("--ablate", choices=["fusion_sites", "direction"], default=None)
    e.add_argument("--json", help="write the reports to this JSON file")
    e.add_argument("--gt-as-pred", action="store_true", dest="gt_as_pred",
                   help="debug: score the ground truth against itself")
    e.add_argument("--dump-flows", dest="dump_flows",
                   help="write per-scene flow tensors to this directory")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference checks for all ops")
    c.add_argument("--module", default="all")
    c.add_argument("--tol", type=float, default=1e-5)
    c.set_defaults(fn=cmd_gradcheck)

    o = sub.add_parser("op", help="run one registered kernel on .ten files")
    o.add_argument("--name", required=True)
    o.add_argument("--in", dest="inputs", nargs="*", default=[])
    o.add_argument("--out", dest="outputs", nargs="+", required=True)
    o.add_argument("--args", default="")
    o.set_defaults(fn=cmd_op)

    i = sub.add_parser("infer", help="run inference for one scene")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--scene", type=int, default=0)
    i.add_argument("--iters", type=int, default=None)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_infer)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (SpecError, DatasetError, SerializationError, ContractError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigMismatch as e:
        print(f"config mismatch: {e}", file=sys.stderr)
        return EXIT_CONFIG_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
