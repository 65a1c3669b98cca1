"""Point-cloud neural primitives.

All operations take features as tensors and geometry (positions, neighbor
indices, offsets) as plain arrays; gradients flow through features and MLP
parameters only.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import furthest_point_sampling, knn_search
from .params import MLP, Linear
from .tensor import ContractError, ShapeError, Tensor, as_tensor


@dataclass
class NeighborGraph:
    """k neighbors per query point, with offsets target - query.

    queries and targets may be the same cloud (self-graphs include the
    point itself as its nearest neighbor).
    """
    indices: np.ndarray    # Q x k, into the target cloud
    offsets: np.ndarray    # Q x k x 3
    k: int

    @classmethod
    def build(cls, queries, targets, k):
        if k < 1:
            raise ContractError("neighbor graphs need k >= 1")
        idx, off = knn_search(queries, targets, k)
        return cls(indices=idx, offsets=off, k=k)


class PointConvParams:
    """Weight net over offsets plus the flattened projection layer."""

    def __init__(self, b, cin, cout, weight_dim=8, hidden=16):
        self.weight_dim = weight_dim
        self.weightnet = MLP(b.sub("weightnet"), (3, hidden, weight_dim))
        self.proj = Linear(b.sub("proj"), weight_dim * cin, cout)
        self.cin = cin


def pointconv(features, graph, params):
    """Continuous convolution: offset-conditioned weights applied to
    neighbor features, summed over the neighborhood, then projected."""
    features = as_tensor(features)
    q, k = graph.indices.shape
    if features.data.ndim != 2:
        raise ShapeError("pointconv: features must be N x C")
    if features.shape[1] != params.cin:
        raise ShapeError(f"pointconv: feature dim {features.shape[1]} != {params.cin}")
    if graph.indices.max() >= features.shape[0]:
        raise ShapeError("pointconv: graph indexes past the feature table")
    cw, cin = params.weight_dim, params.cin
    off = Tensor(graph.offsets.reshape(q * k, 3).astype(features.dtype))
    w = T.reshape(params.weightnet(off), (q, k, cw, 1))
    fj = T.reshape(T.gather(features, graph.indices), (q, k, 1, cin))
    agg = T.sum_(T.mul(w, fj), axis=1)            # q x cw x cin
    return params.proj(T.reshape(agg, (q, cw * cin)))


class PointConvDWParams:
    """Depth-wise separable variant: per-point feature transform and an
    offset-conditioned spatial gate, combined by elementwise max."""

    def __init__(self, b, cin, cout, hidden=16):
        self.feature_mlp = Linear(b.sub("feature"), cin, cout)
        self.spatial_mlp = MLP(b.sub("spatial"), (3, hidden, cout))
        self.cin = cin
        self.cout = cout


def pointconv_dw(features, graph, params):
    """max_j( spatial(p_j - p_i) * feature(F_j) ); ties go to the lowest
    neighbor index."""
    features = as_tensor(features)
    q, k = graph.indices.shape
    if k < 1:
        raise ContractError("pointconv_dw: empty neighborhood")
    if features.shape[1] != params.cin:
        raise ShapeError(f"pointconv_dw: feature dim {features.shape[1]} != {params.cin}")
    fprime = params.feature_mlp(features)                       # N x cout
    fj = T.gather(fprime, graph.indices)                        # q x k x cout
    off = Tensor(graph.offsets.reshape(q * k, 3).astype(features.dtype))
    s = T.reshape(params.spatial_mlp(off), (q, k, params.cout))
    return T.max_(T.mul(s, fj), axis=1)


def point_avg_pool(positions, features, m, k):
    """FPS to m centers; each center's feature is the mean of its k nearest
    source features. Returns (center_indices, pooled_features)."""
    features = as_tensor(features)
    n = len(positions)
    if m > n:
        raise ContractError(f"point_avg_pool: m={m} > n={n}")
    sel = furthest_point_sampling(positions, m)
    idx, _ = knn_search(np.asarray(positions)[sel], positions, k)
    pooled = T.mean(T.gather(features, idx), axis=1)
    return sel, pooled


def knn_upsample_flow(sparse_positions, sparse_flow, dense_positions, k=3):
    """Inverse-distance-weighted mean of the k nearest sparse flows.

    A dense point coinciding with a sparse point copies that flow exactly
    (lowest index on ties) instead of going through the smoothed weights.
    """
    sparse_flow = as_tensor(sparse_flow)
    m = len(sparse_positions)
    if m == 0:
        raise ContractError("knn_upsample_flow: empty sparse set")
    if k > m:
        raise ContractError(f"knn_upsample_flow: k={k} > sparse size {m}")
    idx, off = knn_search(dense_positions, sparse_positions, k)
    d = np.sqrt(np.sum(off * off, axis=2))                      # Q x k
    w = 1.0 / (d + 1e-8)
    w /= w.sum(axis=1, keepdims=True)
    exact = d[:, 0] == 0.0
    if exact.any():
        w[exact] = 0.0
        w[exact, 0] = 1.0
    flows = T.gather(sparse_flow, idx)                          # Q x k x 3
    weights = Tensor(w[:, :, None].astype(sparse_flow.dtype))
    return T.sum_(T.mul(flows, weights), axis=1)
