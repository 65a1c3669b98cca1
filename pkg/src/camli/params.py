"""Parameter registry and scoped initialization streams.

Each model owns one ParamStore. Builders hand out Parameters under a
hierarchical name prefix; every scope draws its init values from an RNG
stream keyed by (seed, scope path), so a submodule's initialization does
not depend on which sibling modules exist. That keeps ablation variants
bitwise-comparable on their shared branches.
"""

import zlib

import numpy as np

from .tensor import ContractError, Parameter


class ParamStore:
    """Ordered name -> Parameter registry; names must be unique."""

    def __init__(self):
        self._params = {}

    def register(self, p):
        if p.name in self._params:
            raise ContractError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def named(self):
        return list(self._params.items())

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def state(self):
        """name -> ndarray snapshot (copies)."""
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state):
        for name, p in self._params.items():
            if name not in state:
                raise ContractError(f"missing parameter {name!r} in state")
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ContractError(f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
            p.data[...] = arr


def _scope_rng(seed, path):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), zlib.crc32(path.encode())])))


class Builder:
    """Creates named parameters under a scope with a scope-local RNG."""

    def __init__(self, store, seed, prefix="", dtype=np.float32):
        self.store = store
        self.seed = seed
        self.prefix = prefix
        self.dtype = dtype
        self._rng = None

    def sub(self, name):
        path = f"{self.prefix}.{name}" if self.prefix else name
        return Builder(self.store, self.seed, path, self.dtype)

    @property
    def rng(self):
        if self._rng is None:
            self._rng = _scope_rng(self.seed, self.prefix)
        return self._rng

    def _full(self, name):
        return f"{self.prefix}.{name}" if self.prefix else name

    def uniform(self, name, shape, fan_in):
        """Zero-mean uniform with variance 2/fan_in; biases are made separately."""
        bound = np.sqrt(6.0 / fan_in)
        data = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        return self.store.register(Parameter(data, self._full(name), dtype=self.dtype))

    def zeros(self, name, shape):
        return self.store.register(Parameter(np.zeros(shape, dtype=self.dtype), self._full(name)))

    def ones(self, name, shape):
        return self.store.register(Parameter(np.ones(shape, dtype=self.dtype), self._full(name)))


# common layer bundles ------------------------------------------------------

class Linear:
    def __init__(self, b, cin, cout, bias=True):
        self.w = b.uniform("w", (cin, cout), fan_in=cin)
        self.b = b.zeros("b", (cout,)) if bias else None

    def __call__(self, x):
        from . import tensor as T
        return T.linear(x, self.w, self.b)


class Conv2d:
    def __init__(self, b, cin, cout, k, stride=1, bias=True):
        self.w = b.uniform("w", (cout, cin, k, k), fan_in=cin * k * k)
        self.b = b.zeros("b", (cout,)) if bias else None
        self.stride = stride

    def __call__(self, x):
        from . import tensor as T
        return T.conv2d_same(x, self.w, self.b, stride=self.stride)


class InstanceNorm:
    """Per-channel normalization over the non-channel axes with a learned
    affine. Keeps feature magnitudes bounded so correlation dot products
    cannot blow up as training rescales the encoders."""

    def __init__(self, b, channels, channel_axis, eps=1e-5):
        self.g = b.ones("g", (channels,))
        self.b = b.zeros("b", (channels,))
        self.channel_axis = channel_axis
        self.eps = eps

    def __call__(self, x):
        from . import tensor as T
        return T.channel_norm(x, self.g, self.b, self.channel_axis, self.eps)


class MLP:
    """Stack of Linear layers with leaky_relu(0.1) between them."""

    def __init__(self, b, dims, bias=True, final_bias=None):
        self.layers = []
        n = len(dims) - 1
        for i in range(n):
            use_bias = bias if (final_bias is None or i < n - 1) else final_bias
            self.layers.append(Linear(b.sub(f"fc{i}"), dims[i], dims[i + 1], bias=use_bias))

    def __call__(self, x):
        from . import tensor as T
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.leaky_relu(x, 0.1)
        return x
