"""Camera model and point-cloud geometric kernels.

Index-producing kernels (FPS, k-NN) are pure numpy; bilinear sampling is
built from tape primitives so gradients flow to both the feature map and
the sample coordinates.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, DomainError, ShapeError, Tensor, as_tensor


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")

    def scaled(self, s):
        """Intrinsics of the same camera at an s-times smaller image."""
        return CameraIntrinsics(self.fx * s, self.fy * s, self.cx * s, self.cy * s)


@dataclass
class PointCloud:
    """Positions in the camera frame (z forward), per-point features, and
    the original-index map into the cloud this one was sampled from."""
    positions: np.ndarray               # N x 3
    features: np.ndarray = None         # N x C
    indices: np.ndarray = None          # N

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ShapeError("positions must be N x 3")
        if self.indices is None:
            self.indices = np.arange(len(self.positions))
        if len(np.unique(self.indices)) != len(self.indices):
            raise ContractError("point indices must be unique")

    def __len__(self):
        return len(self.positions)


def project_points(positions, cam):
    """Pinhole projection to continuous pixel coordinates (N x 2)."""
    p = np.asarray(positions)
    z = p[:, 2]
    bad = np.nonzero(z <= 0)[0]
    if bad.size:
        raise DomainError(f"projection requires z > 0; offending indices: {bad[:16].tolist()}")
    x = cam.fx * p[:, 0] / z + cam.cx
    y = cam.fy * p[:, 1] / z + cam.cy
    return np.stack([x, y], axis=1)


def unproject_points(pixels, depths, cam):
    """Algebraic inverse of project_points for known depths."""
    px = np.asarray(pixels)
    z = np.asarray(depths)
    x = (px[:, 0] - cam.cx) * z / cam.fx
    y = (px[:, 1] - cam.cy) * z / cam.fy
    return np.stack([x, y, z], axis=1)


def inverse_depth_scaling(positions):
    """(x, y, z) -> (x/z, y/z, log z + 1); evens out density across depth."""
    p = np.asarray(positions)
    z = p[:, 2]
    if np.any(z <= 0):
        raise DomainError("inverse depth scaling requires z > 0")
    return np.stack([p[:, 0] / z, p[:, 1] / z, np.log(z) + 1.0], axis=1)


def inverse_depth_scaling_inv(transformed):
    q = np.asarray(transformed)
    z = np.exp(q[:, 2] - 1.0)
    return np.stack([q[:, 0] * z, q[:, 1] * z, z], axis=1)


def furthest_point_sampling(positions, m, start_index=0):
    """Greedy max-min subsampling; ties break to the lowest index.

    Returns the m selected indices in selection order.
    """
    p = np.asarray(positions, dtype=np.float64)
    n = len(p)
    if not 1 <= m <= n:
        raise ContractError(f"furthest_point_sampling: m={m} outside [1, {n}]")
    if not 0 <= start_index < n:
        raise ContractError("start_index out of range")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start_index
    mind = np.sum((p - p[start_index]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(mind))  # argmax takes the first (lowest) index on ties
        selected[i] = nxt
        d = np.sum((p - p[nxt]) ** 2, axis=1)
        np.minimum(mind, d, out=mind)
    return selected


def knn_search(queries, targets, k):
    """k nearest targets per query, ascending distance, ties by lowest index.

    Works for any point dimensionality (3D clouds, 2D pixel sets). Returns
    (indices Q x k, offsets Q x k x D) with offsets = target - query.
    """
    q = np.asarray(queries, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    n = len(t)
    if not 1 <= k <= n:
        raise ContractError(f"knn_search: k={k} outside [1, {n}]")
    d2 = np.sum(q * q, axis=1)[:, None] - 2.0 * (q @ t.T) + np.sum(t * t, axis=1)[None, :]
    # stable sort keeps index order among exact ties
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    offsets = t[order] - q[:, None, :]
    return order, offsets


def _corner_gather(fmap_rows, yi, xi, w, h, border):
    """Gather rows yi*w+xi from an (H*W, C) tensor; zero border masks out-of-range."""
    if border == "zeros":
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
        vals = T.gather(fmap_rows, idx)
        return T.mul(vals, Tensor(valid.astype(fmap_rows.dtype)[:, None]))
    return T.gather(fmap_rows, yi * w + xi)


def bilinear_sample(fmap, coords, border="clamp"):
    """Sample fmap[C,H,W] at continuous (x, y) coords[N,2] -> [N,C].

    border="clamp" clamps coordinates to the frame (feature sampling must
    not vanish at the edge); border="zeros" returns zero outside the frame
    (correlation lookup must signal "no match"). Differentiable w.r.t. both
    the map and the coordinates.
    """
    fmap = as_tensor(fmap)
    coords = as_tensor(coords)
    if fmap.data.ndim != 3:
        raise ShapeError("bilinear_sample: fmap must be CxHxW")
    if coords.data.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError("bilinear_sample: coords must be Nx2")
    if not np.isfinite(coords.data).all():
        raise DomainError("bilinear_sample: coords must be finite")
    c, h, w = fmap.shape
    rows = T.reshape(T.transpose(fmap, (1, 2, 0)), (h * w, c))

    x = T.narrow(coords, 1, 0, 1)
    y = T.narrow(coords, 1, 1, 1)
    if border == "clamp":
        x = T.clamp(x, 0.0, w - 1.0)
        y = T.clamp(y, 0.0, h - 1.0)
        x0 = np.minimum(np.floor(x.data), w - 2).astype(np.int64)
        y0 = np.minimum(np.floor(y.data), h - 2).astype(np.int64)
    elif border == "zeros":
        x0 = np.floor(x.data).astype(np.int64)
        y0 = np.floor(y.data).astype(np.int64)
    else:
        raise ContractError(f"unknown border mode {border!r}")

    wx = T.sub(x, Tensor(x0.astype(fmap.dtype)))   # N x 1, in [0, 1]
    wy = T.sub(y, Tensor(y0.astype(fmap.dtype)))
    one = Tensor(np.ones_like(wx.data))
    ix0, iy0 = x0[:, 0], y0[:, 0]
    f00 = _corner_gather(rows, iy0, ix0, w, h, border)
    f01 = _corner_gather(rows, iy0, ix0 + 1, w, h, border)
    f10 = _corner_gather(rows, iy0 + 1, ix0, w, h, border)
    f11 = _corner_gather(rows, iy0 + 1, ix0 + 1, w, h, border)
    wxc = T.sub(one, wx)
    wyc = T.sub(one, wy)
    out = T.add(
        T.add(T.mul(f00, T.mul(wxc, wyc)), T.mul(f01, T.mul(wx, wyc))),
        T.add(T.mul(f10, T.mul(wxc, wy)), T.mul(f11, T.mul(wx, wy))),
    )
    return out
