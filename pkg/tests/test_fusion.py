import numpy as np
import pytest

import camli.tensor as T
from camli.fusion import (BiCLFMParams, ScoreNet, SelectiveFuseParams,
                          align_2d_to_3d, biclfm_fuse, learnable_interpolation,
                          selective_fuse)
from camli.geometry import CameraIntrinsics, knn_search, project_points
from camli.gradcheck import grad_check
from camli.params import Builder, ParamStore
from camli.tensor import ContractError, ShapeError, Tape, Tensor


def builder(seed=0, dtype=np.float64):
    store = ParamStore()
    return store, Builder(store, seed, dtype=dtype)


def make_biclfm(c2d, c3d, seed=0, dtype=np.float64, interp_k=1):
    store, b = builder(seed, dtype)
    return store, BiCLFMParams(b.sub("fusion"), c2d, c3d, r=2, interp_k=interp_k)


CAM = CameraIntrinsics(4.0, 4.0, 3.5, 3.5)


# --------------------------------------------------------------------------
# selective fusion

def test_selective_fuse_equal_logits_average():
    store, b = builder()
    params = SelectiveFuseParams(b, 4, r=2)
    params.expand.w.data[...] = 0.0
    params.expand.b.data[...] = 0.0
    rng = np.random.default_rng(0)
    fa = Tensor(rng.normal(size=(4, 3, 3)))
    fb = Tensor(rng.normal(size=(4, 3, 3)))
    out = selective_fuse(fa, fb, params, channel_axis=0)
    assert np.max(np.abs(out.data - 0.5 * (fa.data + fb.data))) < 1e-12


def test_selective_fuse_saturated_attention():
    store, b = builder()
    params = SelectiveFuseParams(b, 2, r=2)
    params.expand.w.data[...] = 0.0
    # logits layout: (C, 2) row-major; force the first column
    params.expand.b.data[...] = np.array([50.0, -50.0, 50.0, -50.0])
    rng = np.random.default_rng(1)
    fa = Tensor(rng.normal(size=(5, 2)))
    fb = Tensor(rng.normal(size=(5, 2)))
    out = selective_fuse(fa, fb, params, channel_axis=1)
    assert np.max(np.abs(out.data - fa.data)) < 1e-4


def test_selective_fuse_rows_sum_to_one_and_convexity():
    store, b = builder(seed=3)
    params = SelectiveFuseParams(b, 6, r=2)
    rng = np.random.default_rng(2)
    fa = Tensor(np.full((6, 4, 4), 2.0))
    fb = Tensor(np.full((6, 4, 4), -1.0))
    out = selective_fuse(fa, fb, params, channel_axis=0)
    # convex combination of two constant maps stays between them
    assert np.all(out.data <= 2.0 + 1e-6) and np.all(out.data >= -1.0 - 1e-6)
    z = T.mean(T.add(fa, fb), axis=(1, 2))
    logits = params.expand(T.leaky_relu(params.reduce(T.reshape(z, (1, 6))), 0.1))
    attn = T.softmax(T.reshape(logits, (6, 2)), axis=1).data
    assert np.max(np.abs(attn.sum(axis=1) - 1.0)) < 1e-6


def test_selective_fuse_gradcheck():
    store, b = builder(seed=4)
    params = SelectiveFuseParams(b, 4, r=2)
    rng = np.random.default_rng(3)
    fa = Tensor(rng.normal(size=(4, 2, 2)), requires_grad=True, dtype=np.float64)
    fb = Tensor(rng.normal(size=(4, 2, 2)), requires_grad=True, dtype=np.float64)
    inputs = [fa, fb] + [p for _, p in store.named()]
    wsum = Tensor(rng.normal(size=(4, 2, 2)))
    rep = grad_check(lambda *_: T.sum_(T.mul(selective_fuse(fa, fb, params, 0), wsum)),
                     inputs, tol=1e-5)
    assert rep.passed, rep


def test_selective_fuse_shape_guard():
    store, b = builder()
    params = SelectiveFuseParams(b, 4, r=2)
    with pytest.raises(ShapeError):
        selective_fuse(Tensor(np.zeros((4, 2, 2))), Tensor(np.zeros((4, 2, 3))), params, 0)
    with pytest.raises(ContractError):
        SelectiveFuseParams(builder()[1], 5, r=2)


# --------------------------------------------------------------------------
# learnable interpolation

def frozen_scorenet(value=1000.0):
    store, b = builder()
    sn = ScoreNet(b.sub("sn"), hidden=4)
    for layer in sn.mlp.layers:
        layer.w.data[...] = 0.0
        layer.b.data[...] = 0.0
    sn.mlp.layers[-1].b.data[...] = value   # sigmoid(1000) == 1.0 exactly
    return sn


def test_learnable_interp_k1_is_voronoi_rasterization():
    rng = np.random.default_rng(4)
    pixels = rng.uniform(0, 7, size=(12, 2))
    feats = rng.normal(size=(12, 3))
    sn = frozen_scorenet()
    out = learnable_interpolation(Tensor(feats), pixels, 8, 8, 1, sn).data
    gy, gx = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    queries = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1).astype(float)
    idx, _ = knn_search(queries, pixels, 1)
    expect = feats[idx[:, 0]].T.reshape(3, 8, 8)
    assert np.array_equal(out, expect)


def test_learnable_interp_uniform_features():
    pixels = np.random.default_rng(5).uniform(0, 5, size=(9, 2))
    v = np.array([1.5, -0.5])
    feats = Tensor(np.tile(v, (9, 1)))
    out = learnable_interpolation(feats, pixels, 6, 6, 1, frozen_scorenet()).data
    assert np.allclose(out[0], 1.5) and np.allclose(out[1], -0.5)


def test_learnable_interp_k3_matches_bruteforce_and_gradcheck():
    rng = np.random.default_rng(6)
    pixels = rng.uniform(0, 5, size=(10, 2))
    feats64 = rng.normal(size=(10, 4))
    store, b = builder(seed=7)
    sn = ScoreNet(b.sub("sn"), hidden=6)
    h, w, k = 5, 6, 3
    out = learnable_interpolation(Tensor(feats64), pixels, h, w, k, sn).data

    diag = float(np.hypot(w, h))
    for py in range(h):
        for px in range(w):
            d = np.sqrt(((np.array([px, py]) - pixels) ** 2).sum(axis=1))
            order = sorted(range(10), key=lambda j: (d[j], j))[:k]
            off = (pixels[order] - np.array([px, py])) / diag
            s = sn(Tensor(off)).data
            expect = (s * feats64[order]).sum(axis=0)
            assert np.max(np.abs(out[:, py, px] - expect)) < 1e-10

    feats = Tensor(feats64, requires_grad=True, dtype=np.float64)
    inputs = [feats] + [p for _, p in store.named()]
    wsum = Tensor(rng.normal(size=(4, h, w)))
    rep = grad_check(lambda *_: T.sum_(T.mul(learnable_interpolation(feats, pixels, h, w, k, sn), wsum)),
                     inputs, tol=1e-5)
    assert rep.passed, rep


def test_learnable_interp_empty_set_error():
    with pytest.raises(ContractError):
        learnable_interpolation(Tensor(np.zeros((0, 2))), np.zeros((0, 2)), 4, 4, 1, frozen_scorenet())


# --------------------------------------------------------------------------
# alignment 2D -> 3D

def test_align_2d_to_3d_exact_pixel_identity_projection():
    store, b = builder(seed=8)
    from camli.params import Linear
    proj = Linear(b.sub("proj"), 3, 3)
    proj.w.data[...] = np.eye(3)
    proj.b.data[...] = 0.0
    rng = np.random.default_rng(7)
    f2d = Tensor(rng.normal(size=(3, 8, 8)))
    # a point projecting exactly to pixel (u, v) = (2, 5)
    cam = CameraIntrinsics(4.0, 4.0, 0.0, 0.0)
    pt = np.array([[2.0 / 4.0 * 2.0, 5.0 / 4.0 * 2.0, 2.0]])
    assert np.allclose(project_points(pt, cam), [[2.0, 5.0]])
    out = align_2d_to_3d(f2d, pt, cam, proj)
    assert np.max(np.abs(out.data[0] - f2d.data[:, 5, 2])) < 1e-12

    out0 = align_2d_to_3d(Tensor(np.zeros((3, 8, 8))), pt, cam, proj)
    assert np.array_equal(out0.data, np.zeros((1, 3)))


# --------------------------------------------------------------------------
# full bidirectional fusion

def rand_inputs(rng, c2d=6, c3d=4, n=10, h=8, w=8, dtype=np.float64):
    f2d = Tensor(rng.normal(size=(c2d, h, w)).astype(dtype), requires_grad=True, dtype=dtype)
    g3d = Tensor(rng.normal(size=(n, c3d)).astype(dtype), requires_grad=True, dtype=dtype)
    pts = np.stack([rng.uniform(-0.6, 0.6, n), rng.uniform(-0.6, 0.6, n), rng.uniform(1.0, 3.0, n)], axis=1)
    return f2d, g3d, pts


def test_biclfm_shapes_preserved():
    rng = np.random.default_rng(8)
    store, params = make_biclfm(6, 4, seed=9)
    f2d, g3d, pts = rand_inputs(rng)
    for direction in ("both", "2d_to_3d", "3d_to_2d", "none"):
        fused2, fused3 = biclfm_fuse(f2d, g3d, pts, CAM, params, detach=True, direction=direction)
        assert fused2.shape == f2d.shape
        assert fused3.shape == g3d.shape


def test_biclfm_detach_blocks_cross_branch_gradients():
    rng = np.random.default_rng(9)
    store, params = make_biclfm(6, 4, seed=10)
    f2d, g3d, pts = rand_inputs(rng)

    with Tape() as tape:
        fused2, _ = biclfm_fuse(f2d, g3d, pts, CAM, params, detach=True)
        tape.backward(T.sum_(fused2))
    assert np.array_equal(g3d.grad, np.zeros_like(g3d.grad))     # no 3D leak into the 2D loss
    assert np.any(f2d.grad != 0)
    # 2D->3D-side parameters receive nothing from the 2D loss
    for name, p in store.named():
        if ".to3d." in name:
            assert np.array_equal(p.grad, np.zeros_like(p.grad)), name

    f2d.zero_grad(); g3d.zero_grad(); store.zero_grad()
    with Tape() as tape:
        _, fused3 = biclfm_fuse(f2d, g3d, pts, CAM, params, detach=True)
        tape.backward(T.sum_(fused3))
    assert np.array_equal(f2d.grad, np.zeros_like(f2d.grad))     # no 2D leak into the 3D loss
    assert np.any(g3d.grad != 0)
    for name, p in store.named():
        if ".to2d." in name:
            assert np.array_equal(p.grad, np.zeros_like(p.grad)), name


def test_biclfm_no_detach_cross_gradients_flow_and_match_fd():
    rng = np.random.default_rng(10)
    store, params = make_biclfm(4, 4, seed=11)
    f2d, g3d, pts = rand_inputs(rng, c2d=4, c3d=4, n=6, h=8, w=8)
    w2 = Tensor(rng.normal(size=f2d.shape))
    w3 = Tensor(rng.normal(size=g3d.shape))

    def f(*_):
        fused2, fused3 = biclfm_fuse(f2d, g3d, pts, CAM, params, detach=False)
        return T.add(T.sum_(T.mul(fused2, w2)), T.sum_(T.mul(fused3, w3)))

    with Tape() as tape:
        tape.backward(f())
    assert np.any(g3d.grad != 0) and np.any(f2d.grad != 0)
    rep = grad_check(f, [f2d, g3d], tol=1e-5)
    assert rep.passed, rep


def test_biclfm_zero_points_saturated_to_image():
    rng = np.random.default_rng(11)
    store, params = make_biclfm(4, 4, seed=12)
    params.sk_dense.expand.w.data[...] = 0.0
    params.sk_dense.expand.b.data[...] = np.tile([60.0, -60.0], 4)
    f2d, _, pts = rand_inputs(rng, c2d=4, c3d=4, n=6)
    g0 = Tensor(np.zeros((6, 4)))
    fused2, _ = biclfm_fuse(f2d, g0, pts, CAM, params, detach=True)
    assert np.max(np.abs(fused2.data - f2d.data)) < 1e-4
