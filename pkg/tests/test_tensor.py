import numpy as np
import pytest

import camli.tensor as T
from camli.gradcheck import grad_check
from camli.tensor import ContractError, DomainError, ShapeError, Tape, Tensor


def rt(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


# --------------------------------------------------------------------------
# forward semantics

def test_sigmoid_symmetry():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_add_zero_is_identity():
    x = Tensor(np.random.default_rng(0).normal(size=7))
    out = T.add(x, Tensor(np.zeros(7)))
    assert np.array_equal(out.data, x.data)


def test_mul_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    x, y = rt(rng, 4), rt(rng, 4)
    rep = grad_check(lambda *_: T.sum_(T.mul(x, y)), [x, y], eps=1e-6, tol=1e-8)
    assert rep.passed, rep


def test_linear_identity_and_zero_weight():
    x = Tensor(np.random.default_rng(2).normal(size=(5, 3)))
    eye = Tensor(np.eye(3))
    zero_b = Tensor(np.zeros(3))
    assert np.array_equal(T.linear(x, eye, zero_b).data, x.data)
    w0 = Tensor(np.zeros((3, 4)))
    b = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    out = T.linear(x, w0, b)
    assert np.array_equal(out.data, np.tile(b.data, (5, 1)))


def test_linear_matches_triple_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    b = rng.normal(size=2)
    expect = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            acc = b[j]
            for k in range(4):
                acc += x[i, k] * w[k, j]
            expect[i, j] = acc
    got = T.linear(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.max(np.abs(got - expect)) < 1e-12


def test_conv2d_one_by_one_identity():
    x = Tensor(np.random.default_rng(4).normal(size=(1, 5, 5)))
    k = Tensor(np.ones((1, 1, 1, 1)))
    out = T.conv2d(x, k, stride=1, padding=0)
    assert np.array_equal(out.data, x.data)


def test_conv2d_all_ones_kernel_on_constant():
    c = 0.7
    x = Tensor(np.full((1, 6, 6), c))
    k = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, k, stride=1, padding=1).data[0]
    assert np.allclose(out[1:-1, 1:-1], 9 * c)
    assert out[0, 0] < 9 * c  # zero-padded corners see fewer taps


def conv_oracle(x, k, b, stride, pad):
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[co]
                for ci in range(cin):
                    for a in range(kh):
                        for bb in range(kw):
                            acc += xp[ci, i * stride + a, j * stride + bb] * k[co, ci, a, bb]
                out[co, i, j] = acc
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_direct_summation_oracle(stride):
    rng = np.random.default_rng(5 + stride)
    x = rng.normal(size=(2, 8, 8))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    got = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=1).data
    expect = conv_oracle(x, k, b, stride, 1)
    assert np.max(np.abs(got - expect)) < 1e-10


def test_softmax_basics():
    out = T.softmax(Tensor([[1.0, 1.0]]), axis=1).data
    assert np.allclose(out, 0.5)
    out = T.softmax(Tensor([[0.0, 20.0]]), axis=1).data
    assert out[0, 1] > 0.9999


def test_softmax_rows_sum_to_one_and_shift_invariance():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, 7))
    s = T.softmax(Tensor(x), axis=1).data
    assert np.max(np.abs(s.sum(axis=1) - 1.0)) < 1e-6
    s2 = T.softmax(Tensor(x + 3.17), axis=1).data
    assert np.max(np.abs(s - s2)) < 1e-12


def test_softmax_gradient():
    rng = np.random.default_rng(7)
    x = rt(rng, 3, 4)
    w = Tensor(rng.normal(size=(3, 4)))
    rep = grad_check(lambda *_: T.sum_(T.mul(T.softmax(x, 1), w)), [x], tol=1e-6)
    assert rep.passed, rep


def test_pools():
    x = Tensor(np.full((2, 4, 4), 3.25))
    assert np.allclose(T.global_avg_pool(x).data, 3.25)
    y = Tensor(np.random.default_rng(8).normal(size=(2, 4, 4)))
    assert T.avg_pool2d(y, 1) is y
    pooled = T.avg_pool2d(y, 2).data
    expect = y.data.reshape(2, 2, 2, 2, 2).mean(axis=(2, 4))
    assert np.array_equal(pooled, expect)
    with pytest.raises(ShapeError):
        T.avg_pool2d(Tensor(np.zeros((1, 5, 4))), 2)


def test_stop_gradient_contracts():
    rng = np.random.default_rng(9)
    x = rt(rng, 6)
    fwd = T.stop_gradient(x)
    assert np.array_equal(fwd.data, x.data)
    with Tape() as tape:
        loss = T.sum_(T.stop_gradient(x))
        tape.backward(loss)
    assert np.array_equal(x.grad, np.zeros(6))
    x.zero_grad()
    with Tape() as tape:
        loss = T.sum_(T.mul(x, T.stop_gradient(x)))
        tape.backward(loss)
    assert np.array_equal(x.grad, x.data)  # d(x*sg(x)) = sg(x), not 2x


def test_backward_sum_gives_ones_and_unused_param_zero():
    rng = np.random.default_rng(10)
    x = rt(rng, 3, 2)
    unused = rt(rng, 4)
    with Tape() as tape:
        tape.backward(T.sum_(x))
    assert np.array_equal(x.grad, np.ones((3, 2)))
    assert np.array_equal(unused.grad, np.zeros(4))


def test_backward_full_chain_matches_fd():
    rng = np.random.default_rng(11)
    x, w, b = rt(rng, 3, 4), rt(rng, 4, 2), rt(rng, 2)
    rep = grad_check(lambda *_: T.sum_(T.sigmoid(T.linear(x, w, b))), [x, w, b], tol=1e-6)
    assert rep.passed, rep


def test_backward_linearity():
    rng = np.random.default_rng(12)
    a, b = 2.3, -1.4
    x = rt(rng, 5)

    def grad_of(fn):
        x.zero_grad()
        with Tape() as tape:
            tape.backward(fn())
        return x.grad.copy()

    gf = grad_of(lambda: T.sum_(T.mul(x, x)))
    gg = grad_of(lambda: T.sum_(T.sigmoid(x)))
    gc = grad_of(lambda: T.add(T.scale(T.sum_(T.mul(x, x)), a), T.scale(T.sum_(T.sigmoid(x)), b)))
    assert np.max(np.abs(gc - (a * gf + b * gg))) < 1e-10


def test_errors():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(DomainError):
        T.log(Tensor([-1.0]))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ContractError):
        with Tape() as tape:
            x = rt(np.random.default_rng(0), 3)
            tape.backward(T.mul(x, x))  # non-scalar loss


def test_tape_single_use():
    x = rt(np.random.default_rng(13), 3)
    with Tape() as tape:
        loss = T.sum_(x)
        tape.backward(loss)
        with pytest.raises(ContractError):
            tape.backward(loss)


def test_forward_determinism_bitwise():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor(rng.normal(size=(4, 4)))
        return T.tanh(T.matmul(x, x)).data.copy()

    assert np.array_equal(run(), run())


def test_gradcheck_constant_function_passes():
    x = rt(np.random.default_rng(14), 3)
    rep = grad_check(lambda *_: T.sum_(T.mul(x, Tensor(np.zeros(3)))), [x], tol=1e-6)
    assert rep.passed and rep.max_rel_err == 0.0


def test_gradcheck_detects_nondeterminism():
    state = {"n": 0}
    x = rt(np.random.default_rng(15), 2)

    def f(*_):
        state["n"] += 1
        return T.scale(T.sum_(x), 1.0 + 0.1 * state["n"])

    with pytest.raises(ContractError):
        grad_check(f, [x])
