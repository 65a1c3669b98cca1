"""Registered gradient-check suites for every differentiable operation.

Each suite builds >= 5 small random double-precision instances and runs the
central-difference checker; the CLI and the acceptance tests both consume
this registry.
"""

import numpy as np

from . import tensor as T
from .correlation import build_corr2d, build_corr3d, lookup_corr2d, lookup_corr3d
from .fusion import ScoreNet, SelectiveFuseParams, learnable_interpolation, selective_fuse
from .geometry import bilinear_sample
from .gradcheck import grad_check
from .network import CamLiRAFT, ModelConfig, convex_upsample
from .params import MLP, Builder, ParamStore
from .pointops import NeighborGraph, PointConvDWParams, PointConvParams, pointconv, pointconv_dw
from .synthdata import SceneSpec, generate_scene
from .tensor import Tensor

DEFAULT_TOL = 1e-5
N_INSTANCES = 5


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def _t(rng, *shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True, dtype=np.float64)


def _weighted_sum(x, rng):
    """Scalar objective with a random constant weighting."""
    w = Tensor(rng.uniform(-1.0, 1.0, size=x.shape))
    return T.sum_(T.mul(x, w))


def _params_of(store):
    return [p for _, p in store.named()]


def _builder(seed):
    store = ParamStore()
    return store, Builder(store, seed, dtype=np.float64)


def _jitter_params(store, seed, bias_only=False, scale=1.0):
    """Move parameters (notably zero biases) off the exact kink points of
    piecewise activations; central differences are only valid away from
    those measure-zero corners. bias_only keeps weight magnitudes at their
    fan-in scale so deep stacks do not saturate their gates."""
    rng = _rng(90000 + seed)
    for name, p in store.named():
        if bias_only and not name.endswith(".b"):
            continue
        mag = rng.uniform(0.05, 0.35, size=p.data.shape) * scale
        p.data += mag * rng.choice([-1.0, 1.0], size=p.data.shape)


# --------------------------------------------------------------------------
# suites: each yields (case_name, report)

def suite_elementwise(tol):
    out = []
    unary = {
        "sigmoid": T.sigmoid,
        "tanh": T.tanh,
        "leaky_relu": lambda x: T.leaky_relu(x, 0.1),
        "exp": T.exp,
    }
    for i in range(N_INSTANCES):
        rng = _rng(100 + i)
        shape = tuple(rng.integers(2, 5, size=int(rng.integers(1, 4))))
        x = _t(rng, *shape)
        y = _t(rng, *shape)
        out.append((f"add[{i}]", grad_check(lambda *_: _weighted_sum(T.add(x, y), _rng(7 + i)), [x, y], tol=tol)))
        out.append((f"sub[{i}]", grad_check(lambda *_: _weighted_sum(T.sub(x, y), _rng(8 + i)), [x, y], tol=tol)))
        out.append((f"mul[{i}]", grad_check(lambda *_: _weighted_sum(T.mul(x, y), _rng(9 + i)), [x, y], tol=tol)))
        yz = Tensor(rng.uniform(0.5, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape),
                    requires_grad=True, dtype=np.float64)
        out.append((f"div[{i}]", grad_check(lambda *_: _weighted_sum(T.div(x, yz), _rng(14 + i)), [x, yz], tol=tol)))
        out.append((f"scale[{i}]", grad_check(lambda *_: _weighted_sum(T.scale(x, 1.7), _rng(10 + i)), [x], tol=tol)))
        for name, op in unary.items():
            out.append((f"{name}[{i}]", grad_check(lambda *_: _weighted_sum(op(x), _rng(11 + i)), [x], tol=tol)))
        xp = Tensor(rng.uniform(0.5, 2.0, size=shape), requires_grad=True, dtype=np.float64)
        out.append((f"log[{i}]", grad_check(lambda *_: _weighted_sum(T.log(xp), _rng(12 + i)), [xp], tol=tol)))
        out.append((f"sqrt[{i}]", grad_check(lambda *_: _weighted_sum(T.sqrt(xp), _rng(13 + i)), [xp], tol=tol)))
    return out


def suite_linear(tol):
    out = []
    for i in range(N_INSTANCES):
        rng = _rng(200 + i)
        n, cin, cout = rng.integers(2, 6, size=3)
        x, w, b = _t(rng, n, cin), _t(rng, cin, cout), _t(rng, cout)
        out.append((f"linear[{i}]", grad_check(
            lambda *_: _weighted_sum(T.linear(x, w, b), _rng(20 + i)), [x, w, b], tol=tol)))
    return out


def suite_conv2d(tol):
    out = []
    for i in range(N_INSTANCES):
        rng = _rng(300 + i)
        stride = 1 if i % 2 == 0 else 2
        x = _t(rng, 2, 8, 8)
        k = _t(rng, 3, 2, 3, 3)
        b = _t(rng, 3)
        out.append((f"conv2d[s{stride},{i}]", grad_check(
            lambda *_: _weighted_sum(T.conv2d(x, k, b, stride=stride, padding=1), _rng(30 + i)),
            [x, k, b], tol=tol)))
    return out


def suite_softmax(tol):
    out = []
    for i in range(N_INSTANCES):
        rng = _rng(400 + i)
        x = _t(rng, 4, 5)
        axis = i % 2
        out.append((f"softmax[ax{axis},{i}]", grad_check(
            lambda *_: _weighted_sum(T.softmax(x, axis), _rng(40 + i)), [x], tol=tol)))
    return out


def suite_pools(tol):
    out = []
    for i in range(N_INSTANCES):
        rng = _rng(500 + i)
        x = _t(rng, 3, 4, 6)
        out.append((f"global_avg_pool[{i}]", grad_check(
            lambda *_: _weighted_sum(T.global_avg_pool(x), _rng(50 + i)), [x], tol=tol)))
        out.append((f"avg_pool2d[k2,{i}]", grad_check(
            lambda *_: _weighted_sum(T.avg_pool2d(x, 2), _rng(51 + i)), [x], tol=tol)))
    return out


def suite_bilinear(tol):
    out = []
    for i in range(N_INSTANCES):
        rng = _rng(600 + i)
        fmap = _t(rng, 3, 5, 6)
        # keep sample points off integer grid lines so central differences
        # stay inside one bilinear cell
        base = rng.integers(0, 4, size=(7, 2)).astype(np.float64)
        frac = rng.uniform(0.2, 0.8, size=(7, 2))
        coords = Tensor(base + frac, requires_grad=True, dtype=np.float64)
        for border in ("clamp", "zeros"):
            out.append((f"bilinear[{border},{i}]", grad_check(
                lambda *_: _weighted_sum(bilinear_sample(fmap, coords, border), _rng(60 + i)),
                [fmap, coords], tol=tol)))
    return out


def suite_pointconv(tol):
    out = []
    for i in range(N_INSTANCES):
        rng = _rng(700 + i)
        pos = rng.uniform(-1, 1, size=(8, 3))
        graph = NeighborGraph.build(pos, pos, 3)
        store, b = _builder(70 + i)
        params = PointConvParams(b, 4, 5, weight_dim=3, hidden=6)
        _jitter_params(store, 700 + i)
        feats = _t(rng, 8, 4)
        out.append((f"pointconv[{i}]", grad_check(
            lambda *_: _weighted_sum(pointconv(feats, graph, params), _rng(71 + i)),
            [feats] + _params_of(store), tol=tol)))
    return out


def suite_pointconv_dw(tol):
    out = []
    for i in range(N_INSTANCES):
        rng = _rng(800 + i)
        pos = rng.uniform(-1, 1, size=(8, 3))
        graph = NeighborGraph.build(pos, pos, 4)
        store, b = _builder(80 + i)
        params = PointConvDWParams(b, 4, 5, hidden=6)
        _jitter_params(store, 800 + i)
        feats = _t(rng, 8, 4)
        out.append((f"pointconv_dw[{i}]", grad_check(
            lambda *_: _weighted_sum(pointconv_dw(feats, graph, params), _rng(81 + i)),
            [feats] + _params_of(store), tol=tol)))
    return out


def suite_lookup_corr2d(tol):
    out = []
    for i in range(N_INSTANCES):
        rng = _rng(900 + i)
        f1 = _t(rng, 3, 8, 8)
        f2 = _t(rng, 3, 8, 8)
        # fractional parts are odd multiples of 1/32, so the sample points
        # stay > 1/256 away from cell boundaries at every pyramid level and
        # the +-eps sweep never crosses a bilinear cell
        frac = (2 * rng.integers(0, 16, size=(2, 8, 8)) + 1) / 32.0
        flow = Tensor(rng.integers(-2, 3, size=(2, 8, 8)) + frac,
                      requires_grad=True, dtype=np.float64)
        def f(*_):
            pyr = build_corr2d(f1, f2)
            return _weighted_sum(lookup_corr2d(pyr, flow, d=3), _rng(90 + i))
        out.append((f"lookup_corr2d[{i}]", grad_check(f, [f1, f2, flow], tol=tol)))
    return out


def suite_lookup_corr3d(tol):
    out = []
    for i in range(N_INSTANCES):
        rng = _rng(1000 + i)
        pos1 = rng.uniform(-1, 1, size=(16, 3))
        pos2 = rng.uniform(-1, 1, size=(16, 3))
        g1 = _t(rng, 16, 6)
        g2 = _t(rng, 16, 6)
        flow = Tensor(rng.uniform(-0.05, 0.05, size=(16, 3)), requires_grad=True, dtype=np.float64)
        store, b = _builder(100 + i)
        mlps = [MLP(b.sub(f"l{j}"), (4, 6, 3)) for j in range(4)]
        _jitter_params(store, 1000 + i)
        def f(*_):
            pyr = build_corr3d(g1, g2, pos2)
            return _weighted_sum(lookup_corr3d(pyr, pos1, flow, mlps, k=2), _rng(101 + i))
        out.append((f"lookup_corr3d[{i}]", grad_check(f, [g1, g2, flow] + _params_of(store), tol=tol)))
    return out


def suite_learnable_interpolation(tol):
    out = []
    for i in range(N_INSTANCES):
        rng = _rng(1100 + i)
        pixels = rng.uniform(0.3, 4.7, size=(10, 2))
        feats = _t(rng, 10, 4)
        store, b = _builder(110 + i)
        scorenet = ScoreNet(b.sub("scorenet"), hidden=6)
        _jitter_params(store, 1100 + i)
        out.append((f"learnable_interpolation[{i}]", grad_check(
            lambda *_: _weighted_sum(learnable_interpolation(feats, pixels, 6, 5, 3, scorenet), _rng(111 + i)),
            [feats] + _params_of(store), tol=tol)))
    return out


def suite_selective_fuse(tol):
    out = []
    for i in range(N_INSTANCES):
        rng = _rng(1200 + i)
        store, b = _builder(120 + i)
        params = SelectiveFuseParams(b, 4, r=2)
        _jitter_params(store, 1200 + i)
        fa, fb = _t(rng, 4, 3, 3), _t(rng, 4, 3, 3)
        out.append((f"selective_fuse[dense,{i}]", grad_check(
            lambda *_: _weighted_sum(selective_fuse(fa, fb, params, 0), _rng(121 + i)),
            [fa, fb] + _params_of(store), tol=tol)))
        store2, b2 = _builder(122 + i)
        params2 = SelectiveFuseParams(b2, 4, r=2)
        _jitter_params(store2, 1220 + i)
        ga, gb = _t(rng, 5, 4), _t(rng, 5, 4)
        out.append((f"selective_fuse[sparse,{i}]", grad_check(
            lambda *_: _weighted_sum(selective_fuse(ga, gb, params2, 1), _rng(123 + i)),
            [ga, gb] + _params_of(store2), tol=tol)))
    return out


def suite_convex_upsample(tol):
    out = []
    for i in range(N_INSTANCES):
        rng = _rng(1300 + i)
        flow = _t(rng, 2, 2, 3)
        mask = _t(rng, 8 * 8 * 9, 2, 3)
        out.append((f"convex_upsample[{i}]", grad_check(
            lambda *_: _weighted_sum(convex_upsample(flow, mask), _rng(130 + i)),
            [flow, mask], tol=tol)))
    return out


def _knn_margins_safe(pyr, positions, flow, k, min_margin):
    q = positions + flow
    for pos_l in pyr.positions:
        d2 = np.sort(((q[:, None, :] - pos_l[None, :, :]) ** 2).sum(axis=2), axis=1)
        if len(pos_l) > k and np.min(d2[:, k] - d2[:, k - 1]) < min_margin ** 2:
            return False
    return True


def _small_update_model(seed):
    # detach=False: finite differences measure the true derivative, which
    # includes the cross-branch paths a gradient stop deliberately cuts;
    # the detach contract itself is asserted exactly (zero buffers) in the
    # fusion tests.
    cfg = ModelConfig(image_size=(16, 16), num_points=64, c2d=12, c3d=12,
                      hidden=8, context=8, iters_train=1, iters_eval=1,
                      lookup_window=3, corr_channels=4, knn_encoder=8,
                      knn_update=4, knn_lookup=2, detach=False)
    model = CamLiRAFT(cfg, seed=seed, dtype=np.float64)
    _jitter_params(model.store, seed, bias_only=True, scale=0.3)
    spec = SceneSpec(seed=seed, num_bodies=4, points_per_body=16,
                     intrinsics=(16.0, 16.0, 7.5, 7.5), image_size=(16, 16))
    frame = generate_scene(spec)
    return model, frame


def suite_update_step(tol):
    """Gradient of one recurrent update w.r.t. the state tensors."""
    out = []
    for i in range(N_INSTANCES):
        model, frame = _small_update_model(140 + i)
        state = model.encode(frame)
        rng = _rng(141 + i)
        for key, shape in (("h2", state["h2"].shape), ("h3", state["h3"].shape)):
            state[key] = Tensor(rng.uniform(-0.5, 0.5, size=shape), requires_grad=True, dtype=np.float64)
        # quantized fractions keep every lookup sample > 1/256 from a
        # bilinear cell edge at all pyramid levels
        shape2 = state["flow2d"].shape
        frac = (2 * rng.integers(0, 16, size=shape2) + 1) / 32.0
        state["flow2d"] = Tensor(frac - 0.5, requires_grad=True, dtype=np.float64)
        # resample the 3D flow until the query's k-NN margins are wide at
        # every level, so the +-eps sweep cannot flip a neighbor set
        shape3 = state["flow3d"].shape
        for _ in range(100):
            cand = rng.uniform(-0.02, 0.02, size=shape3)
            if _knn_margins_safe(state["pyr3"], state["cen1"], cand,
                                 model.config.knn_lookup, min_margin=1e-3):
                break
        state["flow3d"] = Tensor(cand, requires_grad=True, dtype=np.float64)
        inputs = [state["h2"], state["h3"], state["flow2d"], state["flow3d"]]
        def f(*_):
            s = model.update_step(dict(state))
            parts = [
                _weighted_sum(s["flow2d"], _rng(143 + i)),
                _weighted_sum(s["flow3d"], _rng(144 + i)),
                _weighted_sum(s["h2"], _rng(145 + i)),
                _weighted_sum(s["h3"], _rng(146 + i)),
            ]
            total = parts[0]
            for p in parts[1:]:
                total = T.add(total, p)
            return total
        # smaller eps: the step must not flip k-NN neighbor sets or max
        # selections whose margins are themselves O(1e-5)
        out.append((f"update_step[{i}]", grad_check(f, inputs, eps=1e-6, tol=tol)))
    return out


def suite_selftest(tol):
    """The checker must flag a corrupted backward implementation."""
    def corrupted_mul(x, y):
        out, tape = T._make_out(x.data * y.data, x, y)
        if tape is not None:
            def fn(g):
                T._accumulate(x, -g * y.data)   # wrong sign on purpose
                T._accumulate(y, -g * x.data)
            tape._record(out, fn)
        return out

    out = []
    for i in range(3):
        rng = _rng(1500 + i)
        x, y = _t(rng, 4), _t(rng, 4)
        rep = grad_check(lambda *_: T.sum_(corrupted_mul(x, y)), [x, y], tol=tol)
        detected = (not rep.passed) and abs(rep.max_rel_err - 2.0) < 0.5
        rep.passed = detected
        out.append((f"corrupted_mul_detected[{i}]", rep))
    return out


SUITES = {
    "elementwise": suite_elementwise,
    "linear": suite_linear,
    "conv2d": suite_conv2d,
    "softmax": suite_softmax,
    "pools": suite_pools,
    "bilinear_sample": suite_bilinear,
    "pointconv": suite_pointconv,
    "pointconv_dw": suite_pointconv_dw,
    "lookup_corr2d": suite_lookup_corr2d,
    "lookup_corr3d": suite_lookup_corr3d,
    "learnable_interpolation": suite_learnable_interpolation,
    "selective_fuse": suite_selective_fuse,
    "convex_upsample": suite_convex_upsample,
    "update_step": suite_update_step,
    "selftest": suite_selftest,
}


def run_suites(names=None, tol=DEFAULT_TOL, update_step_tol=None):
    """Run the selected suites; returns [(suite, case, report)]."""
    names = list(SUITES) if names in (None, ["all"]) else names
    results = []
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown gradcheck module {name!r}; known: {sorted(SUITES)}")
        suite_tol = update_step_tol if (name == "update_step" and update_step_tol) else tol
        for case, rep in SUITES[name](suite_tol):
            results.append((name, case, rep))
    return results
