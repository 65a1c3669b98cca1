"""Bidirectional camera-LiDAR fusion.

Aligns a dense image feature map with sparse point features in both
directions (bilinear sampling at projected points; learnable interpolation
back onto the grid), blends each direction with channel attention, and
optionally detaches the cross-modal feature so each branch's loss only
trains its own parameters.
"""

import numpy as np

from . import tensor as T
from .geometry import bilinear_sample, knn_search, project_points
from .params import MLP, Linear
from .tensor import ContractError, ShapeError, Tensor, as_tensor

FUSION_DIRECTIONS = ("both", "2d_to_3d", "3d_to_2d", "none")


class SelectiveFuseParams:
    """Squeeze (C -> C/r) and expand (C/r -> 2C) layers for channel attention."""

    def __init__(self, b, channels, r=2):
        if channels % r:
            raise ContractError(f"reduction r={r} must divide C={channels}")
        self.channels = channels
        self.reduce = Linear(b.sub("reduce"), channels, channels // r)
        self.expand = Linear(b.sub("expand"), channels // r, channels * 2)


class ScoreNet:
    """Lightweight MLP + sigmoid scoring 2D offsets in (0, 1)."""

    def __init__(self, b, hidden=32):
        self.mlp = MLP(b.sub("mlp"), (2, hidden, 1))

    def __call__(self, offsets):
        return T.sigmoid(self.mlp(offsets))


class BiCLFMParams:
    """Both direction's alignment projections, the interpolation scorenet,
    and one selective-fusion block per direction."""

    def __init__(self, b, c2d, c3d, r=2, interp_k=1, scorenet_hidden=32):
        self.c2d, self.c3d = c2d, c3d
        self.interp_k = interp_k
        to2d = b.sub("to2d")
        to3d = b.sub("to3d")
        self.proj_3d_to_2d = Linear(to2d.sub("proj"), c3d, c2d)
        self.scorenet = ScoreNet(to2d.sub("scorenet"), hidden=scorenet_hidden)
        self.sk_dense = SelectiveFuseParams(to2d.sub("sk"), c2d, r)
        self.proj_2d_to_3d = Linear(to3d.sub("proj"), c2d, c3d)
        self.sk_sparse = SelectiveFuseParams(to3d.sub("sk"), c3d, r)


def selective_fuse(fa, fb, params, channel_axis):
    """Channel-attention blend; per channel the two weights sum to one."""
    fa, fb = as_tensor(fa), as_tensor(fb)
    if fa.shape != fb.shape:
        raise ShapeError(f"selective_fuse: shapes {fa.shape} vs {fb.shape}")
    c = fa.shape[channel_axis]
    if c != params.channels:
        raise ShapeError(f"selective_fuse: {c} channels, params built for {params.channels}")
    s = T.add(fa, fb)
    spatial_axes = tuple(i for i in range(fa.data.ndim) if i != channel_axis)
    z = T.mean(s, axis=spatial_axes) if spatial_axes else s
    z = T.reshape(z, (1, c))
    logits = params.expand(T.leaky_relu(params.reduce(z), 0.1))
    attn = T.softmax(T.reshape(logits, (c, 2)), axis=1)
    a0 = T.narrow(attn, 1, 0, 1)
    a1 = T.narrow(attn, 1, 1, 1)
    bshape = [1] * fa.data.ndim
    bshape[channel_axis] = c
    a0 = T.reshape(a0, bshape)
    a1 = T.reshape(a1, bshape)
    return T.add(T.mul(a0, fa), T.mul(a1, fb))


def align_2d_to_3d(f2d, positions, cam, proj):
    """Sample the image feature at each projected point, then project the
    channels to the point-feature width."""
    pix = project_points(positions, cam)
    f2d = as_tensor(f2d)
    g = bilinear_sample(f2d, Tensor(pix.astype(f2d.dtype)), border="clamp")
    return proj(g)


def grid_neighbors(pixels, height, width, k):
    """k nearest projected points for every pixel center of an HxW grid;
    cacheable since it only depends on the projected positions."""
    gy, gx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    queries = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1).astype(np.float64)
    return knn_search(queries, np.asarray(pixels), k)


def learnable_interpolation(g3d, pixels, height, width, k, scorenet, neighbors=None):
    """Scatter sparse point features onto the pixel grid.

    Every output pixel takes its k nearest projected points; each neighbor
    feature is weighted by the scorenet of the (diagonal-normalized) 2D
    offset and the weighted features are summed. ``neighbors`` may carry a
    precomputed grid_neighbors result.
    """
    g3d = as_tensor(g3d)
    n = g3d.shape[0]
    if n == 0:
        raise ContractError("learnable_interpolation: empty point set")
    if not 1 <= k <= n:
        raise ContractError(f"learnable_interpolation: k={k} outside [1, {n}]")
    idx, off = grid_neighbors(pixels, height, width, k) if neighbors is None else neighbors
    hw = height * width
    diag = float(np.hypot(width, height))
    off_n = Tensor((off / diag).reshape(hw * k, 2).astype(g3d.dtype))
    scores = T.reshape(scorenet(off_n), (hw, k, 1))
    feats = T.gather(g3d, idx)                                   # hw x k x C
    dense = T.sum_(T.mul(feats, scores), axis=1)                 # hw x C
    return T.reshape(T.transpose(dense, (1, 0)), (g3d.shape[1], height, width))


def biclfm_fuse(f2d, g3d, positions, cam, params, detach=True, direction="both",
                interp_neighbors=None):
    """Fuse an image feature map with point features in both directions.

    Spatial structures are preserved: the outputs have exactly the input
    shapes. With detach=True the cross-modal input of each direction is
    gradient-stopped.
    """
    if direction not in FUSION_DIRECTIONS:
        raise ContractError(f"unknown fusion direction {direction!r}")
    f2d, g3d = as_tensor(f2d), as_tensor(g3d)
    if f2d.data.ndim != 3 or g3d.data.ndim != 2:
        raise ShapeError("biclfm_fuse: expects f2d CxHxW and g3d NxC")
    if f2d.shape[0] != params.c2d or g3d.shape[1] != params.c3d:
        raise ShapeError("biclfm_fuse: channel dims do not match params")
    if len(positions) != g3d.shape[0]:
        raise ShapeError("biclfm_fuse: positions/features length mismatch")
    dstop = T.stop_gradient if detach else (lambda x: x)
    _, h, w = f2d.shape

    fused_2d, fused_3d = f2d, g3d
    if direction in ("both", "3d_to_2d"):
        pix = project_points(positions, cam)
        dense = learnable_interpolation(dstop(g3d), pix, h, w, params.interp_k,
                                        params.scorenet, neighbors=interp_neighbors)
        flat = T.reshape(dense, (params.c3d, h * w))
        proj = params.proj_3d_to_2d(T.transpose(flat, (1, 0)))
        aligned = T.reshape(T.transpose(proj, (1, 0)), (params.c2d, h, w))
        fused_2d = selective_fuse(f2d, aligned, params.sk_dense, channel_axis=0)
    if direction in ("both", "2d_to_3d"):
        sampled = align_2d_to_3d(dstop(f2d), positions, cam, params.proj_2d_to_3d)
        fused_3d = selective_fuse(g3d, sampled, params.sk_sparse, channel_axis=1)
    return fused_2d, fused_3d
