"""Two-branch recurrent flow network with bidirectional fusion sites.

The image branch estimates dense optical flow at 1/8 resolution and
upsamples it with a learned convex combination; the point branch estimates
scene flow on a 1/4 furthest-point-sampled cloud (in inverse-depth-scaled
coordinates) and densifies it with k-NN upsampling. The branches exchange
features at up to four sites: feature encoders, context encoders,
correlation lookups, and motion encoders.
"""

from dataclasses import dataclass, asdict
from fractions import Fraction

import numpy as np

from . import tensor as T
from .correlation import build_corr2d, build_corr3d, lookup_corr2d, lookup_corr3d
from .fusion import FUSION_DIRECTIONS, BiCLFMParams, biclfm_fuse, grid_neighbors
from .geometry import furthest_point_sampling, inverse_depth_scaling, project_points
from .params import Builder, Conv2d, InstanceNorm, Linear, MLP, ParamStore
from .pointops import NeighborGraph, PointConvDWParams, PointConvParams, knn_upsample_flow, pointconv, pointconv_dw
from .tensor import ContractError, ShapeError, Tensor

FUSION_SITES = ("feature", "context", "correlation", "motion")


@dataclass
class ModelConfig:
    image_size: tuple = (64, 64)
    num_points: int = 512
    c2d: int = 64
    c3d: int = 64
    hidden: int = 64
    context: int = 64
    iters_train: int = 6
    iters_eval: int = 8
    fusion_sites: tuple = FUSION_SITES
    detach: bool = True
    fusion_direction: str = "both"
    fuse_hidden: bool = False     # ablation-only; degrades quality, never default
    lookup_window: int = 9
    corr_channels: int = 16
    knn_encoder: int = 16
    knn_update: int = 8
    knn_lookup: int = 8
    knn_upsample: int = 3
    sk_reduction: int = 2

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.fusion_sites = tuple(self.fusion_sites)
        h, w = self.image_size
        if h % 8 or w % 8:
            raise ContractError("image extents must be divisible by 8")
        if self.num_points % 4:
            raise ContractError("num_points must be divisible by 4")
        if self.iters_train < 1 or self.iters_eval < 1:
            raise ContractError("iteration counts must be >= 1")
        if self.fusion_direction not in FUSION_DIRECTIONS:
            raise ContractError(f"unknown fusion direction {self.fusion_direction!r}")
        for s in self.fusion_sites:
            if s not in FUSION_SITES:
                raise ContractError(f"unknown fusion site {s!r}")
        m = self.num_points // 4
        if m < 8:
            raise ContractError("sampled cloud too small for a 4-level correlation pyramid")
        if self.knn_lookup > m // 8:
            raise ContractError(
                f"knn_lookup={self.knn_lookup} exceeds the coarsest correlation level ({m // 8})")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FlowEstimate:
    """One iteration's predictions: dense pixel flow plus per-point scene
    flow in meters, ordered like the input cloud."""
    flow2d: Tensor                 # 2 x H x W
    flow3d: Tensor                 # N x 3 (metric)
    flow3d_sparse: Tensor          # M x 3 displacement in IDS coordinates
    sample_indices: np.ndarray     # M indices into the input cloud
    iteration: int


class ResBlock:
    def __init__(self, b, cin, cout, stride=1):
        self.conv1 = Conv2d(b.sub("conv1"), cin, cout, 3, stride=stride)
        self.conv2 = Conv2d(b.sub("conv2"), cout, cout, 3)
        self.skip = Conv2d(b.sub("skip"), cin, cout, 1, stride=stride) if (stride != 1 or cin != cout) else None

    def __call__(self, x):
        y = self.conv2(T.leaky_relu(self.conv1(x), 0.1))
        s = self.skip(x) if self.skip is not None else x
        return T.leaky_relu(T.add(y, s), 0.1)


class ImageEncoder:
    """Six residual blocks from full resolution down to 1/8. Instance
    normalization after every stage keeps the feature scale pinned, which
    the downstream all-pairs dot products rely on."""

    def __init__(self, b, cin, cout):
        self.stem = Conv2d(b.sub("stem"), cin, 32, 7, stride=2)
        widths = (32, 48, 48, 64, 64, 64)
        self.blocks = [
            ResBlock(b.sub("res1"), 32, 32),
            ResBlock(b.sub("res2"), 32, 48, stride=2),
            ResBlock(b.sub("res3"), 48, 48),
            ResBlock(b.sub("res4"), 48, 64, stride=2),
            ResBlock(b.sub("res5"), 64, 64),
            ResBlock(b.sub("res6"), 64, 64),
        ]
        self.norms = [InstanceNorm(b.sub(f"norm{i + 1}"), w, channel_axis=0)
                      for i, w in enumerate(widths)]
        self.stem_norm = InstanceNorm(b.sub("norm0"), 32, channel_axis=0)
        self.head = Conv2d(b.sub("head"), 64, cout, 1)

    def __call__(self, img):
        x = self.stem_norm(T.leaky_relu(self.stem(img), 0.1))
        for blk, norm in zip(self.blocks, self.norms):
            x = norm(blk(x))
        return self.head(x)


class PointEncoder:
    """Continuous convolutions on the full cloud, then aggregation onto the
    1/4 furthest-point-sampled centers; per-channel normalization after
    every stage."""

    def __init__(self, b, cout):
        self.conv1 = PointConvParams(b.sub("conv1"), 3, 32)
        self.conv2 = PointConvParams(b.sub("conv2"), 32, 64)
        self.norm1 = InstanceNorm(b.sub("norm1"), 32, channel_axis=1)
        self.norm2 = InstanceNorm(b.sub("norm2"), 64, channel_axis=1)
        self.head = Linear(b.sub("head"), 64, cout)

    def __call__(self, feats0, g_full, g_down):
        x = self.norm1(T.leaky_relu(pointconv(feats0, g_full, self.conv1), 0.1))
        x = self.norm2(T.leaky_relu(pointconv(x, g_down, self.conv2), 0.1))
        return self.head(x)


class ImageUpdate:
    def __init__(self, b, corr_dim, hidden, context):
        self.convc = Conv2d(b.sub("mot.convc"), corr_dim, 64, 1)
        self.convf = Conv2d(b.sub("mot.convf"), 2, 32, 3)
        self.convm = Conv2d(b.sub("mot.convm"), 96, 62, 3)
        self.motion_dim = 64
        gin = hidden + self.motion_dim + context
        self.convz = Conv2d(b.sub("gru.convz"), gin, hidden, 3)
        self.convr = Conv2d(b.sub("gru.convr"), gin, hidden, 3)
        self.convq = Conv2d(b.sub("gru.convq"), gin, hidden, 3)
        self.flow1 = Conv2d(b.sub("flow.conv1"), hidden, 48, 3)
        self.flow2 = Conv2d(b.sub("flow.conv2"), 48, 2, 3)
        self.mask1 = Conv2d(b.sub("mask.conv1"), hidden, 64, 3)
        self.mask2 = Conv2d(b.sub("mask.conv2"), 64, 8 * 8 * 9, 1)
        # start from exactly zero residual flow and a uniform upsample
        self.flow2.w.data[...] = 0.0
        self.mask2.w.data[...] = 0.0

    def motion(self, corr, flow):
        c = T.leaky_relu(self.convc(corr), 0.1)
        f = T.leaky_relu(self.convf(flow), 0.1)
        m = T.leaky_relu(self.convm(T.concat([c, f], axis=0)), 0.1)
        return T.concat([m, flow], axis=0)

    def gru(self, h, x):
        hx = T.concat([h, x], axis=0)
        z = T.sigmoid(self.convz(hx))
        r = T.sigmoid(self.convr(hx))
        q = T.tanh(self.convq(T.concat([T.mul(r, h), x], axis=0)))
        return T.add(h, T.mul(z, T.sub(q, h)))

    def flow_head(self, h):
        return self.flow2(T.leaky_relu(self.flow1(h), 0.1))

    def mask_head(self, h):
        return self.mask2(T.leaky_relu(self.mask1(h), 0.1))


class PointUpdate:
    def __init__(self, b, corr_dim, hidden, context):
        self.mot = PointConvDWParams(b.sub("mot.pcdw"), corr_dim + 3, 61)
        self.motion_dim = 64
        gin = hidden + self.motion_dim + context
        self.gz = PointConvDWParams(b.sub("gru.z"), gin, hidden)
        self.gr = PointConvDWParams(b.sub("gru.r"), gin, hidden)
        self.gq = PointConvDWParams(b.sub("gru.q"), gin, hidden)
        self.flow1 = PointConvDWParams(b.sub("flow.pcdw"), hidden, 48)
        self.flow2 = Linear(b.sub("flow.out"), 48, 3)
        self.flow2.w.data[...] = 0.0   # start from exactly zero residual flow

    def motion(self, corr, flow, graph):
        x = T.concat([corr, flow], axis=1)
        m = T.leaky_relu(pointconv_dw(x, graph, self.mot), 0.1)
        return T.concat([m, flow], axis=1)

    def gru(self, h, x, graph):
        hx = T.concat([h, x], axis=1)
        z = T.sigmoid(pointconv_dw(hx, graph, self.gz))
        r = T.sigmoid(pointconv_dw(hx, graph, self.gr))
        q = T.tanh(pointconv_dw(T.concat([T.mul(r, h), x], axis=1), graph, self.gq))
        return T.add(h, T.mul(z, T.sub(q, h)))

    def flow_head(self, h, graph):
        return self.flow2(T.leaky_relu(pointconv_dw(h, graph, self.flow1), 0.1))


def convex_upsample(flow, mask_logits, factor=8):
    """Upsample coarse flow by ``factor``: each fine pixel is a softmax-
    convex combination of its 3x3 (replicate-padded) coarse neighborhood,
    with flow magnitudes scaled by the factor."""
    flow, mask_logits = T.as_tensor(flow), T.as_tensor(mask_logits)
    if flow.data.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError("convex_upsample: flow must be 2 x Hc x Wc")
    _, hc, wc = flow.shape
    if mask_logits.shape != (factor * factor * 9, hc, wc):
        raise ShapeError(
            f"convex_upsample: mask shape {mask_logits.shape} != ({factor * factor * 9}, {hc}, {wc})")
    flow8 = T.scale(flow, float(factor))
    rows = T.reshape(T.transpose(flow8, (1, 2, 0)), (hc * wc, 2))
    gy, gx = np.meshgrid(np.arange(hc), np.arange(wc), indexing="ij")
    nbr_idx = np.empty((9, hc * wc), dtype=np.int64)
    n = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            yi = np.clip(gy + dy, 0, hc - 1)
            xi = np.clip(gx + dx, 0, wc - 1)
            nbr_idx[n] = (yi * wc + xi).reshape(-1)
            n += 1
    nbr = T.gather(rows, nbr_idx)                                    # 9 x HW x 2
    m = T.softmax(T.reshape(mask_logits, (9, factor * factor, hc * wc)), axis=0)
    prod = T.mul(T.reshape(nbr, (9, 1, hc * wc, 2)), T.reshape(m, (9, factor * factor, hc * wc, 1)))
    comb = T.sum_(prod, axis=0)                                      # f*f x HW x 2
    comb = T.reshape(comb, (factor, factor, hc, wc, 2))
    fine = T.transpose(comb, (4, 2, 0, 3, 1))                        # 2, hc, f, wc, f
    return T.reshape(fine, (2, hc * factor, wc * factor))


def _split_context(raw, hidden, context, channel_axis):
    h0 = T.tanh(T.narrow(raw, channel_axis, 0, hidden))
    ctx = T.relu(T.narrow(raw, channel_axis, hidden, context))
    return h0, ctx


def _ids_to_metric_flow(ids_positions, displacement, metric_positions):
    """Invert inverse-depth scaling on (ids + displacement) and subtract the
    original metric positions, all on the tape."""
    q = T.add(Tensor(ids_positions.astype(displacement.dtype)), displacement)
    z = T.exp(T.sub(T.narrow(q, 1, 2, 1), 1.0))
    x = T.mul(T.narrow(q, 1, 0, 1), z)
    y = T.mul(T.narrow(q, 1, 1, 1), z)
    metric = T.concat([x, y, z], axis=1)
    return T.sub(metric, Tensor(metric_positions.astype(displacement.dtype)))


class CamLiRAFT:
    """Toy-scale recurrent camera-LiDAR flow estimator."""

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.store = ParamStore()
        self._geom_cache = {}
        b = Builder(self.store, seed, dtype=self.dtype)
        c = config
        hidden, context = c.hidden, c.context

        self.fnet2d = ImageEncoder(b.sub("img.fnet"), 3, c.c2d)
        self.cnet2d = ImageEncoder(b.sub("img.cnet"), 3, hidden + context)
        self.fnet3d = PointEncoder(b.sub("pt.fnet"), c.c3d)
        self.cnet3d = PointEncoder(b.sub("pt.cnet"), hidden + context)

        corr2d_dim = 4 * c.lookup_window ** 2
        corr3d_dim = 4 * c.corr_channels
        self.lookup_mlps = [MLP(b.sub(f"pt.lookup.l{i}"), (4, 32, c.corr_channels)) for i in range(4)]
        self.update2d = ImageUpdate(b.sub("img.update"), corr2d_dim, hidden, context)
        self.update3d = PointUpdate(b.sub("pt.update"), corr3d_dim, hidden, context)

        self._fusers = {}
        if c.fusion_direction != "none":
            r = c.sk_reduction
            if "feature" in c.fusion_sites:
                self._fusers["feature"] = BiCLFMParams(b.sub("fuse_feat"), c.c2d, c.c3d, r)
            if "context" in c.fusion_sites:
                self._fusers["context"] = BiCLFMParams(b.sub("fuse_ctx"), context, context, r)
            if "correlation" in c.fusion_sites:
                self._fusers["correlation"] = BiCLFMParams(b.sub("fuse_corr"), corr2d_dim, corr3d_dim, r)
            if "motion" in c.fusion_sites:
                self._fusers["motion"] = BiCLFMParams(
                    b.sub("fuse_motion"), self.update2d.motion_dim, self.update3d.motion_dim, r)
            if c.fuse_hidden:
                self._fusers["hidden"] = BiCLFMParams(b.sub("fuse_hidden"), hidden, hidden, r)

    # ------------------------------------------------------------------

    def _fuse(self, site, f2d, g3d, positions, cam, interp_neighbors=None):
        if site not in self._fusers:
            return f2d, g3d
        return biclfm_fuse(f2d, g3d, positions, cam, self._fusers[site],
                           detach=self.config.detach, direction=self.config.fusion_direction,
                           interp_neighbors=interp_neighbors)

    def _check_frame(self, frame):
        h, w = self.config.image_size
        if frame.image1.shape != (3, h, w) or frame.image2.shape != (3, h, w):
            raise ContractError(
                f"frame image shape {frame.image1.shape} does not match config {(3, h, w)}")
        if len(frame.points1) != self.config.num_points:
            raise ContractError(
                f"frame has {len(frame.points1)} points, config expects {self.config.num_points}")

    def _frame_geometry(self, frame):
        """Parameter-independent per-frame geometry (IDS coordinates, FPS
        selections, neighbor graphs), cached per frame object."""
        key = id(frame)
        hit = self._geom_cache.get(key)
        if hit is not None and hit[0] is frame:
            return hit[1]
        c = self.config
        n = c.num_points
        m = n // 4
        k_enc = min(c.knn_encoder, n)
        dt = self.dtype
        ids1 = inverse_depth_scaling(frame.points1).astype(dt)
        ids2 = inverse_depth_scaling(frame.points2).astype(dt)
        sel1 = furthest_point_sampling(ids1, m)
        sel2 = furthest_point_sampling(ids2, m)
        cen1, cen2 = ids1[sel1], ids2[sel2]
        geom = {
            "ids1": ids1, "ids2": ids2, "sel1": sel1, "sel2": sel2,
            "cen1": cen1, "cen2": cen2,
            "g_full1": NeighborGraph.build(ids1, ids1, k_enc),
            "g_full2": NeighborGraph.build(ids2, ids2, k_enc),
            "g_down1": NeighborGraph.build(cen1, ids1, k_enc),
            "g_down2": NeighborGraph.build(cen2, ids2, k_enc),
            "g_upd": NeighborGraph.build(cen1, cen1, min(c.knn_update, m)),
        }
        if self._fusers:
            h, w = c.image_size
            cam8 = frame.cam.scaled(1.0 / 8.0)
            interp_k = next(iter(self._fusers.values())).interp_k
            for tag, sel in (("1", sel1), ("2", sel2)):
                pix = project_points(frame.points1 if tag == "1" else frame.points2, cam8)
                geom[f"interp{tag}"] = grid_neighbors(pix[sel], h // 8, w // 8, interp_k)
        if len(self._geom_cache) > 512:
            self._geom_cache.clear()
        self._geom_cache[key] = (frame, geom)
        return geom

    def encode(self, frame):
        """Run both feature and context encoders plus the correlation
        pyramids; returns the state consumed by update_step."""
        self._check_frame(frame)
        c = self.config
        h, w = c.image_size

        dt = self.dtype
        geom = self._frame_geometry(frame)
        ids1, sel1, cen1, cen2 = geom["ids1"], geom["sel1"], geom["cen1"], geom["cen2"]
        g_full1, g_full2 = geom["g_full1"], geom["g_full2"]
        g_down1, g_down2 = geom["g_down1"], geom["g_down2"]
        ids2, sel2 = geom["ids2"], geom["sel2"]

        img1 = Tensor(frame.image1.astype(dt))
        img2 = Tensor(frame.image2.astype(dt))
        feats0_1 = Tensor(ids1)
        feats0_2 = Tensor(ids2)

        f1 = self.fnet2d(img1)
        f2 = self.fnet2d(img2)
        g1 = self.fnet3d(feats0_1, g_full1, g_down1)
        g2 = self.fnet3d(feats0_2, g_full2, g_down2)

        cam8 = frame.cam.scaled(1.0 / 8.0)
        pos1_m = frame.points1[sel1]
        pos2_m = frame.points2[sel2]
        nbr1 = geom.get("interp1")
        f1, g1 = self._fuse("feature", f1, g1, pos1_m, cam8, nbr1)
        f2, g2 = self._fuse("feature", f2, g2, pos2_m, cam8, geom.get("interp2"))

        raw2 = self.cnet2d(img1)
        raw3 = self.cnet3d(feats0_1, g_full1, g_down1)
        h2, ctx2 = _split_context(raw2, c.hidden, c.context, channel_axis=0)
        h3, ctx3 = _split_context(raw3, c.hidden, c.context, channel_axis=1)
        ctx2, ctx3 = self._fuse("context", ctx2, ctx3, pos1_m, cam8, nbr1)

        pyr2 = build_corr2d(f1, f2)
        pyr3 = build_corr3d(g1, g2, cen2)

        return {
            "h2": h2, "h3": h3, "ctx2": ctx2, "ctx3": ctx3,
            "pyr2": pyr2, "pyr3": pyr3, "g_upd": geom["g_upd"],
            "ids1": ids1, "cen1": cen1, "sel1": sel1,
            "pos1_m": pos1_m, "cam8": cam8, "interp1": geom.get("interp1"),
            "flow2d": Tensor(np.zeros((2, h // 8, w // 8), dtype=dt)),
            "flow3d": Tensor(np.zeros((len(cen1), 3), dtype=dt)),
            "iteration": 0,
        }

    def update_step(self, state):
        """One recurrent update: lookup, motion encoding, GRUs, residual
        flows. Mutates and returns the state."""
        c = self.config
        corr2 = lookup_corr2d(state["pyr2"], state["flow2d"], d=c.lookup_window)
        corr2 = T.transpose(corr2, (2, 0, 1))
        corr3 = lookup_corr3d(state["pyr3"], state["cen1"], state["flow3d"],
                              self.lookup_mlps, c.knn_lookup)
        corr2, corr3 = self._fuse("correlation", corr2, corr3, state["pos1_m"], state["cam8"],
                                  state.get("interp1"))

        m2 = self.update2d.motion(corr2, state["flow2d"])
        m3 = self.update3d.motion(corr3, state["flow3d"], state["g_upd"])
        m2, m3 = self._fuse("motion", m2, m3, state["pos1_m"], state["cam8"], state.get("interp1"))

        h2 = self.update2d.gru(state["h2"], T.concat([m2, state["ctx2"]], axis=0))
        h3 = self.update3d.gru(state["h3"], T.concat([m3, state["ctx3"]], axis=1), state["g_upd"])
        if self.config.fuse_hidden:
            h2, h3 = self._fuse("hidden", h2, h3, state["pos1_m"], state["cam8"], state.get("interp1"))
        state["h2"], state["h3"] = h2, h3

        state["flow2d"] = T.add(state["flow2d"], self.update2d.flow_head(h2))
        state["flow3d"] = T.add(state["flow3d"], self.update3d.flow_head(h3, state["g_upd"]))
        state["iteration"] += 1
        return state

    def estimate_from_state(self, state, frame):
        """Upsample the current coarse flows to a full-resolution estimate."""
        mask = self.update2d.mask_head(state["h2"])
        up2 = convex_upsample(state["flow2d"], mask)
        disp_all = knn_upsample_flow(state["cen1"], state["flow3d"], state["ids1"],
                                     k=self.config.knn_upsample)
        flow_m = _ids_to_metric_flow(state["ids1"], disp_all, frame.points1)
        return FlowEstimate(flow2d=up2, flow3d=flow_m,
                            flow3d_sparse=state["flow3d"],
                            sample_indices=state["sel1"],
                            iteration=state["iteration"])

    def forward(self, frame, iters=None):
        """Full pass: encode once, then ``iters`` update steps, emitting one
        FlowEstimate per iteration."""
        iters = self.config.iters_train if iters is None else int(iters)
        if iters < 1:
            raise ContractError("forward needs at least one iteration")
        state = self.encode(frame)
        estimates = []
        for _ in range(iters):
            state = self.update_step(state)
            estimates.append(self.estimate_from_state(state, frame))
        return estimates


def sequence_loss(estimates, gt_flow2d, valid2d, gt_flow3d, occ3d=None,
                  alpha=0.8, respect_occlusion=False):
    """Exponentially weighted multi-iteration loss, final iteration weight 1.

    gt_flow2d is a dense (2, H, W) map with valid2d selecting supervised
    pixels; gt_flow3d is per input point and is gathered at the sampled
    points by original index.
    """
    if not estimates:
        raise ContractError("sequence_loss: no estimates")
    gt2 = np.asarray(gt_flow2d, dtype=np.float32)
    gt3 = np.asarray(gt_flow3d, dtype=np.float32)
    if not (np.isfinite(gt2).all() and np.isfinite(gt3).all()):
        raise ContractError("sequence_loss: non-finite ground truth")
    v2 = np.ones(gt2.shape[1:], dtype=np.float32) if valid2d is None else np.asarray(valid2d, dtype=np.float32)
    n2 = float(v2.sum())
    if n2 == 0:
        raise ContractError("sequence_loss: empty 2D mask")

    n_iters = len(estimates)
    weights = loss_weights(n_iters, alpha)
    total = None
    l2d_val = l3d_val = 0.0
    for i, est in enumerate(estimates):
        if not (np.isfinite(est.flow2d.data).all() and np.isfinite(est.flow3d.data).all()):
            raise ContractError(f"sequence_loss: non-finite prediction at iteration {est.iteration}")
        wgt = weights[i]

        e2 = T.sub(est.flow2d, Tensor(gt2))
        dist2 = T.sqrt(T.sum_(T.mul(e2, e2), axis=0))
        l2 = T.scale(T.sum_(T.mul(dist2, Tensor(v2))), 1.0 / n2)

        sel = est.sample_indices
        gts = gt3[sel]
        pred = T.gather(est.flow3d, sel)
        e3 = T.sub(pred, Tensor(gts))
        dist3 = T.sqrt(T.sum_(T.mul(e3, e3), axis=1))
        if respect_occlusion and occ3d is not None:
            v3 = (1.0 - np.asarray(occ3d, dtype=np.float32).reshape(-1)[sel])
            if v3.sum() == 0:
                raise ContractError("sequence_loss: empty 3D mask")
            l3 = T.scale(T.sum_(T.mul(dist3, Tensor(v3))), 1.0 / float(v3.sum()))
        else:
            l3 = T.mean(dist3)

        l2d_val += wgt * float(l2.data)
        l3d_val += wgt * float(l3.data)
        term = T.scale(T.add(l2, l3), wgt)
        total = term if total is None else T.add(total, term)
    return total, l2d_val, l3d_val


def loss_weights(num_iterations, alpha=0.8):
    """Per-iteration weights alpha^(N-1-i), oldest first; the final
    iteration weighs 1. Powers are taken in exact rational arithmetic and
    rounded once, so e.g. the 3-iteration weights are exactly
    (0.64, 0.8, 1.0) rather than 0.8*0.8 = 0.6400000000000001."""
    a = Fraction(alpha).limit_denominator(10 ** 9)
    return [float(a ** (num_iterations - 1 - i)) for i in range(num_iterations)]
