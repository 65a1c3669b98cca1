"""Array-in/array-out registry of the package's kernels.

This is the op-level external interface: every entry takes a list of
numpy arrays plus a JSON-able args dict and returns a list of numpy
arrays. The `camli op` subcommand and the bindings package drive it.
"""

import numpy as np

from . import tensor as T
from .correlation import build_corr2d, build_corr3d, lookup_corr2d, lookup_corr3d
from .geometry import (bilinear_sample, furthest_point_sampling, inverse_depth_scaling,
                       inverse_depth_scaling_inv, knn_search)
from .metrics import compute_metrics
from .pointops import knn_upsample_flow
from .tensor import ContractError, Tensor


def _op_inverse_depth_scaling(arrays, args):
    (pts,) = arrays
    return [inverse_depth_scaling(pts)]


def _op_inverse_depth_scaling_inv(arrays, args):
    (pts,) = arrays
    return [inverse_depth_scaling_inv(pts)]


def _op_fps(arrays, args):
    (pts,) = arrays
    sel = furthest_point_sampling(pts, int(args["m"]), int(args.get("start_index", 0)))
    return [sel.astype(np.float64)]


def _op_knn(arrays, args):
    queries, targets = arrays
    idx, off = knn_search(queries, targets, int(args["k"]))
    return [idx.astype(np.float64), off]


def _op_bilinear_sample(arrays, args):
    fmap, coords = arrays
    out = bilinear_sample(Tensor(fmap), Tensor(coords), border=args.get("border", "clamp"))
    return [out.data]


def _scorenet_from_arrays(w1, b1, w2, b2):
    def apply(off):
        h = T.leaky_relu(T.linear(off, Tensor(w1), Tensor(b1)), 0.1)
        return T.sigmoid(T.linear(h, Tensor(w2), Tensor(b2)))
    return apply


def _op_learnable_interpolation(arrays, args):
    from .fusion import learnable_interpolation
    feats, pixels, w1, b1, w2, b2 = arrays
    out = learnable_interpolation(
        Tensor(feats), pixels, int(args["height"]), int(args["width"]), int(args["k"]),
        _scorenet_from_arrays(w1, b1, w2, b2))
    return [out.data]


def _op_build_corr2d(arrays, args):
    f1, f2 = arrays
    pyr = build_corr2d(Tensor(f1), Tensor(f2))
    return [lvl.data for lvl in pyr.levels]


def _op_lookup_corr2d(arrays, args):
    f1, f2, flow = arrays
    pyr = build_corr2d(Tensor(f1), Tensor(f2))
    return [lookup_corr2d(pyr, Tensor(flow), d=int(args.get("d", 9))).data]


def _op_build_corr3d(arrays, args):
    g1, g2, pos2 = arrays
    pyr = build_corr3d(Tensor(g1), Tensor(g2), pos2, pool_k=int(args.get("pool_k", 8)))
    return [v.data for v in pyr.volumes] + [np.asarray(p) for p in pyr.positions]


def _mlp_from_arrays(w1, b1, w2, b2):
    def apply(x):
        h = T.leaky_relu(T.linear(x, Tensor(w1), Tensor(b1)), 0.1)
        return T.linear(h, Tensor(w2), Tensor(b2))
    return apply


def _op_lookup_corr3d(arrays, args):
    g1, g2, pos2, pos1, flow = arrays[:5]
    param_arrays = arrays[5:]
    if len(param_arrays) != 16:
        raise ContractError("lookup_corr3d op expects 4 levels x (w1,b1,w2,b2) parameter arrays")
    mlps = [_mlp_from_arrays(*param_arrays[4 * i:4 * i + 4]) for i in range(4)]
    pyr = build_corr3d(Tensor(g1), Tensor(g2), pos2, pool_k=int(args.get("pool_k", 8)))
    out = lookup_corr3d(pyr, pos1, Tensor(flow), mlps, k=int(args["k"]))
    return [out.data]


def _op_knn_upsample_flow(arrays, args):
    sparse_pos, sparse_flow, dense_pos = arrays
    out = knn_upsample_flow(sparse_pos, Tensor(sparse_flow), dense_pos, k=int(args.get("k", 3)))
    return [out.data]


def _op_compute_metrics(arrays, args):
    pred2d, gt2d, mask2d, pred3d, gt3d, mask3d = arrays
    r = compute_metrics(pred2d, gt2d, mask2d, pred3d, gt3d, mask3d)
    vec = np.array([r.epe2d, r.acc1px, r.epe3d, r.acc05, r.acc_s, r.acc_r, r.outliers,
                    r.count_2d, r.count_3d], dtype=np.float64)
    return [vec]


OPS = {
    "inverse_depth_scaling": _op_inverse_depth_scaling,
    "inverse_depth_scaling_inv": _op_inverse_depth_scaling_inv,
    "fps": _op_fps,
    "knn": _op_knn,
    "bilinear_sample": _op_bilinear_sample,
    "learnable_interpolation": _op_learnable_interpolation,
    "build_corr2d": _op_build_corr2d,
    "lookup_corr2d": _op_lookup_corr2d,
    "build_corr3d": _op_build_corr3d,
    "lookup_corr3d": _op_lookup_corr3d,
    "knn_upsample_flow": _op_knn_upsample_flow,
    "compute_metrics": _op_compute_metrics,
}


def run_op(name, arrays, args=None):
    if name not in OPS:
        raise KeyError(f"unknown op {name!r}; known: {sorted(OPS)}")
    return OPS[name](list(arrays), args or {})
