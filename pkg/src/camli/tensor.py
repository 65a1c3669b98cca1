"""Minimal reverse-mode differentiation engine over dense numpy arrays.

Every learnable operation in the package is composed from the primitives
defined here. Gradients are recorded on an explicit, single-use Tape; with
no tape active, primitives run forward-only.
"""

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """Operand values outside an operation's numeric domain."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class Tensor:
    """Dense n-dimensional array with an optional gradient slot.

    The data buffer is immutable after construction; only ``grad`` is
    mutated (by backward passes and optimizers). Leaf tensors created with
    ``requires_grad=True`` start with a zero-filled gradient so unused
    parameters report an exact zero gradient after backward.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would promote 0-d scalars to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Learnable tensor with a unique name path (e.g. "fusion.scorenet.w1")."""

    __slots__ = ("name",)

    def __init__(self, data, name, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.shape)})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# --------------------------------------------------------------------------
# Tape

class _Node:
    __slots__ = ("out", "fn")

    def __init__(self, out, fn):
        self.out = out
        self.fn = fn


_TAPE_STACK = []


class Tape:
    """Ordered record of executed primitives for one forward pass.

    Nodes are appended in execution order, so the record is topologically
    sorted by construction and ``backward`` replays it exactly once in
    reverse. A tape is single-use: a second backward call is an error.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _record(self, out, fn):
        self._nodes.append(_Node(out, fn))

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss):
        """Populate gradients of every requires_grad ancestor of ``loss``."""
        if self._consumed:
            raise ContractError("tape already consumed by a previous backward call")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ContractError("backward requires a scalar loss tensor")
        self._consumed = True
        _accumulate(loss, np.ones_like(loss.data))
        for node in reversed(self._nodes):
            g = node.out.grad
            if g is None:
                continue
            node.fn(g)
            # intermediate grads are transient; free them once consumed
            if not isinstance(node.out, Parameter):
                node.out.grad = None
        self._nodes.clear()


def backward(loss):
    """Run backward on the innermost active tape."""
    if not _TAPE_STACK:
        raise ContractError("backward called with no active tape")
    _TAPE_STACK[-1].backward(loss)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _make_out(data, *inputs):
    """Wrap op output; requires_grad only when recording is possible."""
    tape = _active_tape()
    rg = tape is not None and any(i.requires_grad for i in inputs)
    out = Tensor(data)
    out.requires_grad = rg
    return out, tape if rg else None


def _unbroadcast(g, shape):
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce_pair(x, y, opname):
    """Wrap operands; python scalars adopt the tensor operand's dtype."""
    if isinstance(x, Tensor) and not isinstance(y, Tensor):
        y = Tensor(np.asarray(y, dtype=x.data.dtype))
    elif isinstance(y, Tensor) and not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=y.data.dtype))
    else:
        x, y = as_tensor(x), as_tensor(y)
    if x.data.dtype != y.data.dtype:
        raise ShapeError(f"{opname}: dtype mismatch {x.data.dtype} vs {y.data.dtype}")
    try:
        np.broadcast_shapes(x.shape, y.shape)
    except ValueError as e:
        raise ShapeError(f"{opname}: incompatible shapes {x.shape} vs {y.shape}") from e
    return x, y


# --------------------------------------------------------------------------
# Elementwise primitives

def add(x, y):
    x, y = _coerce_pair(x, y, "add")
    out, tape = _make_out(x.data + y.data, x, y)
    if tape is not None:
        def fn(g):
            if x.requires_grad:
                _accumulate(x, _unbroadcast(g, x.shape))
            if y.requires_grad:
                _accumulate(y, _unbroadcast(g, y.shape))
        tape._record(out, fn)
    return out


def sub(x, y):
    x, y = _coerce_pair(x, y, "sub")
    out, tape = _make_out(x.data - y.data, x, y)
    if tape is not None:
        def fn(g):
            if x.requires_grad:
                _accumulate(x, _unbroadcast(g, x.shape))
            if y.requires_grad:
                _accumulate(y, _unbroadcast(-g, y.shape))
        tape._record(out, fn)
    return out


def mul(x, y):
    x, y = _coerce_pair(x, y, "mul")
    out, tape = _make_out(x.data * y.data, x, y)
    if tape is not None:
        xd, yd = x.data, y.data
        def fn(g):
            if x.requires_grad:
                _accumulate(x, _unbroadcast(g * yd, x.shape))
            if y.requires_grad:
                _accumulate(y, _unbroadcast(g * xd, y.shape))
        tape._record(out, fn)
    return out


def scale(x, c):
    """Multiply by a python scalar."""
    x = as_tensor(x)
    c = float(c)
    out, tape = _make_out(x.data * c, x)
    if tape is not None:
        def fn(g):
            _accumulate(x, g * c)
        tape._record(out, fn)
    return out


def neg(x):
    return scale(x, -1.0)


def div(x, y):
    x, y = _coerce_pair(x, y, "div")
    if np.any(y.data == 0):
        raise DomainError("div: zero denominator")
    out, tape = _make_out(x.data / y.data, x, y)
    if tape is not None:
        xd, yd = x.data, y.data
        def fn(g):
            if x.requires_grad:
                _accumulate(x, _unbroadcast(g / yd, x.shape))
            if y.requires_grad:
                _accumulate(y, _unbroadcast(-g * xd / (yd * yd), y.shape))
        tape._record(out, fn)
    return out


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    # numerically stable two-sided form
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out, tape = _make_out(s, x)
    if tape is not None:
        def fn(g):
            _accumulate(x, g * s * (1.0 - s))
        tape._record(out, fn)
    return out


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)
    out, tape = _make_out(t, x)
    if tape is not None:
        def fn(g):
            _accumulate(x, g * (1.0 - t * t))
        tape._record(out, fn)
    return out


def leaky_relu(x, slope=0.1):
    x = as_tensor(x)
    mask = x.data > 0
    out, tape = _make_out(np.where(mask, x.data, slope * x.data), x)
    if tape is not None:
        def fn(g):
            _accumulate(x, np.where(mask, g, slope * g))
        tape._record(out, fn)
    return out


def relu(x):
    return leaky_relu(x, 0.0)


def exp(x):
    x = as_tensor(x)
    e = np.exp(x.data)
    out, tape = _make_out(e, x)
    if tape is not None:
        def fn(g):
            _accumulate(x, g * e)
        tape._record(out, fn)
    return out


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive inputs")
    out, tape = _make_out(np.log(x.data), x)
    if tape is not None:
        xd = x.data
        def fn(g):
            _accumulate(x, g / xd)
        tape._record(out, fn)
    return out


def sqrt(x):
    """Elementwise square root; backward denominator guarded at zero.

    The forward value at 0 is exactly 0; the analytic derivative there is
    unbounded, so backward clamps the denominator (subgradient 0 choice is
    avoided because the loss uses it only off the zero point in training).
    """
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt requires non-negative inputs")
    r = np.sqrt(x.data)
    out, tape = _make_out(r, x)
    if tape is not None:
        def fn(g):
            _accumulate(x, g * 0.5 / np.maximum(r, 1e-12))
        tape._record(out, fn)
    return out


def clamp(x, lo, hi):
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    out, tape = _make_out(np.clip(x.data, lo, hi), x)
    if tape is not None:
        def fn(g):
            _accumulate(x, np.where(mask, g, 0.0))
        tape._record(out, fn)
    return out


def stop_gradient(x):
    """Forward identity; contributes exactly zero gradient to ``x``."""
    x = as_tensor(x)
    out = Tensor(x.data)
    out.requires_grad = False
    return out


# --------------------------------------------------------------------------
# Linear algebra / structural primitives

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError("matmul: dtype mismatch")
    out, tape = _make_out(a.data @ b.data, a, b)
    if tape is not None:
        ad, bd = a.data, b.data
        def fn(g):
            if a.requires_grad:
                _accumulate(a, g @ bd.T)
            if b.requires_grad:
                _accumulate(b, ad.T @ g)
        tape._record(out, fn)
    return out


def linear(x, w, b=None):
    """x[N, Cin] @ w[Cin, Cout] + b[Cout]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} x {w.shape}")
    y = matmul(x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        y = add(y, b)
    return y


def reshape(x, shape):
    x = as_tensor(x)
    out, tape = _make_out(x.data.reshape(shape), x)
    if tape is not None:
        orig = x.shape
        def fn(g):
            _accumulate(x, g.reshape(orig))
        tape._record(out, fn)
    return out


def transpose(x, axes):
    x = as_tensor(x)
    out, tape = _make_out(np.ascontiguousarray(x.data.transpose(axes)), x)
    if tape is not None:
        inv = np.argsort(axes)
        def fn(g):
            _accumulate(x, g.transpose(inv))
        tape._record(out, fn)
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of empty list")
    out, tape = _make_out(np.concatenate([t.data for t in tensors], axis=axis), *tensors)
    if tape is not None:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def fn(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _accumulate(t, g[tuple(idx)])
        tape._record(out, fn)
    return out


def narrow(x, axis, start, length):
    """Contiguous slice along one axis."""
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    out, tape = _make_out(np.ascontiguousarray(x.data[tuple(idx)]), x)
    if tape is not None:
        def fn(g):
            gx = np.zeros_like(x.data)
            gx[tuple(idx)] = g
            _accumulate(x, gx)
        tape._record(out, fn)
    return out


def gather(x, index):
    """Index along axis 0 with an arbitrary-shape integer array.

    out[i...] = x[index[i...], ...]; backward scatter-adds.
    """
    x = as_tensor(x)
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError("gather: index out of range")
    out, tape = _make_out(x.data[index], x)
    if tape is not None:
        def fn(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, index, g)
            _accumulate(x, gx)
        tape._record(out, fn)
    return out


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out, tape = _make_out(x.data.sum(axis=axis, keepdims=keepdims), x)
    if tape is not None:
        def fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=True))
        tape._record(out, fn)
    return out


def mean(x, axis=None, keepdims=False):
    """Arithmetic mean (numpy semantics, so it matches mean-based oracles
    exactly); backward spreads g/n."""
    x = as_tensor(x)
    if axis is None:
        n = x.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.shape[a] for a in axis]))
    else:
        n = x.shape[axis]
    out, tape = _make_out(x.data.mean(axis=axis, keepdims=keepdims), x)
    if tape is not None:
        def fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(g / n, x.shape).astype(x.data.dtype, copy=True))
        tape._record(out, fn)
    return out


def max_(x, axis):
    """Max over one axis; subgradient routed to the argmax (ties: lowest index)."""
    x = as_tensor(x)
    am = np.argmax(x.data, axis=axis)
    out, tape = _make_out(np.max(x.data, axis=axis), x)
    if tape is not None:
        def fn(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, np.expand_dims(am, axis), np.expand_dims(g, axis), axis=axis)
            _accumulate(x, gx)
        tape._record(out, fn)
    return out


def softmax(x, axis):
    x = as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out, tape = _make_out(s, x)
    if tape is not None:
        def fn(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accumulate(x, (g - dot) * s)
        tape._record(out, fn)
    return out


# --------------------------------------------------------------------------
# Spatial primitives (channel-first images, C x H x W)

def conv2d(x, k, b=None, stride=1, padding=0):
    """Cross-correlation of x[Cin,H,W] with k[Cout,Cin,kh,kw], zero padding."""
    x, k = as_tensor(x), as_tensor(k)
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise ShapeError("conv2d: x must be CxHxW, k must be CoutxCinxkhxkw")
    cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: channel mismatch {cin} vs {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel extents must be odd")
    p, s = int(padding), int(stride)
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d: output would be empty")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((cin * kh * kw, ho * wo), dtype=x.data.dtype)
    r = 0
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + s * ho:s, j:j + s * wo:s]
            cols[r:r + cin] = patch.reshape(cin, -1)
            r += cin
    # rows are ordered (i, j, cin); kernel must be flattened the same way
    kmat = k.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    y = (kmat.T @ cols).reshape(cout, ho, wo)
    if b is not None:
        bt = as_tensor(b)
        if bt.shape != (cout,):
            raise ShapeError("conv2d: bias shape mismatch")
        y = y + bt.data[:, None, None]
    inputs = (x, k) if b is None else (x, k, bt)
    out, tape = _make_out(y, *inputs)
    if tape is not None:
        def fn(g):
            gmat = g.reshape(cout, -1)
            if b is not None and bt.requires_grad:
                _accumulate(bt, gmat.sum(axis=1))
            if k.requires_grad:
                gk = (cols @ gmat.T).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
                _accumulate(k, np.ascontiguousarray(gk))
            if x.requires_grad:
                gcols = kmat @ gmat
                gxp = np.zeros((cin, h + 2 * p, w + 2 * p), dtype=g.dtype)
                rr = 0
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i:i + s * ho:s, j:j + s * wo:s] += gcols[rr:rr + cin].reshape(cin, ho, wo)
                        rr += cin
                _accumulate(x, gxp[:, p:p + h, p:p + w] if p else gxp)
        tape._record(out, fn)
    return out


def conv2d_same(x, k, b=None, stride=1):
    """conv2d with "same" zero padding (k-1)/2."""
    return conv2d(x, k, b, stride=stride, padding=(as_tensor(k).shape[2] - 1) // 2)


def avg_pool2d(x, k):
    """Pad-free block mean over kxk windows; k=1 is the identity."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError("avg_pool2d: x must be CxHxW")
    c, h, w = x.shape
    k = int(k)
    if k == 1:
        return x
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: extents ({h},{w}) not divisible by {k}")
    y = x.data.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))
    out, tape = _make_out(y, x)
    if tape is not None:
        def fn(g):
            gx = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
            _accumulate(x, gx)
        tape._record(out, fn)
    return out


def global_avg_pool(x):
    """Mean over every axis except the channel axis (axis 0 for CxHxW)."""
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError("global_avg_pool needs at least 2 dims")
    return mean(x, axis=tuple(range(1, x.data.ndim)))


def channel_norm(x, gain, bias, channel_axis, eps=1e-5):
    """Per-channel standardization over all non-channel axes with a learned
    affine, fused into one tape node."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    c = x.shape[channel_axis]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"channel_norm: affine shapes must be ({c},)")
    axes = tuple(i for i in range(x.data.ndim) if i != channel_axis)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    bshape = [1] * x.data.ndim
    bshape[channel_axis] = c
    gb = gain.data.reshape(bshape)
    out, tape = _make_out(xhat * gb + bias.data.reshape(bshape), x, gain, bias)
    if tape is not None:
        def fn(g):
            if bias.requires_grad:
                _accumulate(bias, g.sum(axis=axes).reshape(bias.shape))
            if gain.requires_grad:
                _accumulate(gain, (g * xhat).sum(axis=axes).reshape(gain.shape))
            if x.requires_grad:
                gx = g * gb
                m1 = gx.mean(axis=axes, keepdims=True)
                m2 = (gx * xhat).mean(axis=axes, keepdims=True)
                _accumulate(x, (gx - m1 - xhat * m2) * inv)
        tape._record(out, fn)
    return out
