"""All-pair similarity volumes, their pyramids, and per-iteration lookups.

Similarities are scaled by 1/sqrt(C) to keep magnitudes stable across
channel widths. 2D lookups zero-pad out-of-range samples (a miss must read
as "no match"), unlike feature sampling elsewhere which clamps.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import furthest_point_sampling, knn_search
from .tensor import ContractError, ShapeError, Tensor, as_tensor


@dataclass
class Corr2DPyramid:
    levels: list          # tensors of shape (H, W, Hl, Wl)
    height: int
    width: int


@dataclass
class Corr3DPyramid:
    positions: list       # per level: (Nl, 3) target positions
    volumes: list         # per level: tensor (N, Nl)


def _pool_last2(vol, h, w, hl, wl):
    """Halve the last two dims of an (H, W, Hl, Wl) volume by block mean."""
    if hl == 1 and wl == 1:
        return vol, hl, wl
    if hl % 2 or wl % 2:
        raise ShapeError(f"correlation pyramid: cannot halve odd extents ({hl},{wl})")
    flat = T.reshape(vol, (h * w, hl, wl))
    pooled = T.avg_pool2d(flat, 2)
    return T.reshape(pooled, (h, w, hl // 2, wl // 2)), hl // 2, wl // 2


def build_corr2d(f1, f2, num_levels=4):
    """4-level pyramid of all-pairs dot products between image features."""
    f1, f2 = as_tensor(f1), as_tensor(f2)
    if f1.shape != f2.shape or f1.data.ndim != 3:
        raise ShapeError(f"build_corr2d: shapes {f1.shape} vs {f2.shape}")
    c, h, w = f1.shape
    a = T.reshape(T.transpose(f1, (1, 2, 0)), (h * w, c))
    b = T.reshape(T.transpose(f2, (1, 2, 0)), (h * w, c))
    v0 = T.scale(T.matmul(a, T.transpose(b, (1, 0))), 1.0 / np.sqrt(c))
    levels = [T.reshape(v0, (h, w, h, w))]
    hl, wl = h, w
    for _ in range(num_levels - 1):
        nxt, hl, wl = _pool_last2(levels[-1], h, w, hl, wl)
        levels.append(nxt)
    return Corr2DPyramid(levels=levels, height=h, width=w)


def lookup_corr2d(pyr, flow, d=9):
    """Sample a d x d window around x + flow at every pyramid level.

    Returns an (H, W, 4*d*d) feature; out-of-range samples contribute zero.
    """
    flow = as_tensor(flow)
    h, w = pyr.height, pyr.width
    if d % 2 == 0:
        raise ContractError("lookup window d must be odd")
    if flow.shape != (2, h, w):
        raise ShapeError(f"lookup_corr2d: flow shape {flow.shape} != (2, {h}, {w})")
    dt = flow.dtype
    r = d // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    dx = dx.reshape(1, -1).astype(dt)
    dy = dy.reshape(1, -1).astype(dt)
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    gx = Tensor(gx.reshape(h * w, 1).astype(dt))
    gy = Tensor(gy.reshape(h * w, 1).astype(dt))
    fx = T.reshape(T.narrow(flow, 0, 0, 1), (h * w, 1))
    fy = T.reshape(T.narrow(flow, 0, 1, 1), (h * w, 1))
    cx = T.add(fx, gx)
    cy = T.add(fy, gy)

    feats = []
    for lvl, vol in enumerate(pyr.levels):
        hl, wl = vol.shape[2], vol.shape[3]
        sx = T.add(T.scale(cx, 1.0 / (2 ** lvl)), Tensor(dx))     # (HW, d*d)
        sy = T.add(T.scale(cy, 1.0 / (2 ** lvl)), Tensor(dy))
        x0 = np.floor(sx.data).astype(np.int64)
        y0 = np.floor(sy.data).astype(np.int64)
        wx = T.sub(sx, Tensor(x0.astype(dt)))
        wy = T.sub(sy, Tensor(y0.astype(dt)))
        one = Tensor(np.ones_like(wx.data))
        vol1d = T.reshape(vol, (h * w * hl * wl,))
        qbase = (np.arange(h * w, dtype=np.int64) * (hl * wl))[:, None]
        lv = None
        for ax, ay, wgt in (
            (0, 0, T.mul(T.sub(one, wx), T.sub(one, wy))),
            (1, 0, T.mul(wx, T.sub(one, wy))),
            (0, 1, T.mul(T.sub(one, wx), wy)),
            (1, 1, T.mul(wx, wy)),
        ):
            xi, yi = x0 + ax, y0 + ay
            valid = (xi >= 0) & (xi < wl) & (yi >= 0) & (yi < hl)
            idx = qbase + np.clip(yi, 0, hl - 1) * wl + np.clip(xi, 0, wl - 1)
            vals = T.mul(T.gather(vol1d, idx), Tensor(valid.astype(dt)))
            term = T.mul(vals, wgt)
            lv = term if lv is None else T.add(lv, term)
        feats.append(lv)
    return T.reshape(T.concat(feats, axis=1), (h, w, len(pyr.levels) * d * d))


def build_corr3d(feat1, feat2, positions2, num_levels=4, pool_k=8):
    """4-level point correlation pyramid: all-pairs dot products, then FPS
    downsampling of the target positions with k-NN mean pooling."""
    feat1, feat2 = as_tensor(feat1), as_tensor(feat2)
    if feat1.data.ndim != 2 or feat1.shape[1] != feat2.shape[1]:
        raise ShapeError("build_corr3d: feature dims must match")
    n = feat1.shape[0]
    n2 = feat2.shape[0]
    if n2 < 2 ** (num_levels - 1):
        raise ContractError(f"build_corr3d: {n2} points cannot support {num_levels} levels")
    c = feat1.shape[1]
    v0 = T.scale(T.matmul(feat1, T.transpose(feat2, (1, 0))), 1.0 / np.sqrt(c))
    positions = [np.asarray(positions2)]
    volumes = [v0]
    for _ in range(num_levels - 1):
        prev_pos = positions[-1]
        prev_n = len(prev_pos)
        m = prev_n // 2
        sel = furthest_point_sampling(prev_pos, m)
        centers = prev_pos[sel]
        idx, _ = knn_search(centers, prev_pos, min(pool_k, prev_n))
        cols = T.transpose(volumes[-1], (1, 0))            # prev_n x N
        pooled = T.mean(T.gather(cols, idx), axis=1)       # m x N
        volumes.append(T.transpose(pooled, (1, 0)))
        positions.append(centers)
    return Corr3DPyramid(positions=positions, volumes=volumes)


def lookup_corr3d(pyr, positions1, flow3d, mlps, k):
    """Learnable matching cost against the k nearest positions per level.

    Each level's cost is MLP([q - p_i, V(p_i)]) reduced by elementwise max
    over the neighbors; levels are concatenated.
    """
    flow3d = as_tensor(flow3d)
    pos1 = np.asarray(positions1)
    m = pos1.shape[0]
    if flow3d.shape != (m, 3):
        raise ShapeError(f"lookup_corr3d: flow shape {flow3d.shape} != ({m}, 3)")
    if len(mlps) != len(pyr.volumes):
        raise ContractError("lookup_corr3d: one MLP per pyramid level required")
    q = T.add(Tensor(pos1.astype(flow3d.dtype)), flow3d)
    feats = []
    for lvl, (pos_l, vol_l) in enumerate(zip(pyr.positions, pyr.volumes)):
        nl = len(pos_l)
        if k > nl:
            raise ContractError(f"lookup_corr3d: k={k} exceeds level size {nl}")
        idx, _ = knn_search(q.data, pos_l, k)
        nbr = Tensor(pos_l[idx].astype(flow3d.dtype))              # m x k x 3
        offq = T.sub(T.reshape(q, (m, 1, 3)), nbr)                 # q - p_i
        flat = T.reshape(vol_l, (m * nl,))
        fidx = (np.arange(m, dtype=np.int64) * nl)[:, None] + idx
        vals = T.reshape(T.gather(flat, fidx), (m, k, 1))
        inp = T.reshape(T.concat([offq, vals], axis=2), (m * k, 4))
        cost = T.reshape(mlps[lvl](inp), (m, k, -1))
        feats.append(T.max_(cost, axis=1))
    return T.concat(feats, axis=1)
