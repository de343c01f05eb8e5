"""Parameter containers and the small layer set used by the networks."""
from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=T.default_dtype()), requires_grad=True)


class Module:
    """Tracks child modules and parameters in attribute-assignment order.

    Parameter names are slash-delimited paths, e.g. ``encoder/level0/conv1/weight``.
    """

    training = True

    def __setattr__(self, name, value):
        if isinstance(value, (Parameter, Module)):
            self.__dict__.setdefault("_order", [])
            if name not in self._order:
                self._order.append(name)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name in self.__dict__.get("_order", []):
            value = getattr(self, name)
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            else:
                yield from value.named_parameters(path + "/")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for name in self.__dict__.get("_order", []):
            value = getattr(self, name)
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            if own[name].shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {own[name].shape}")
            own[name].data = np.array(arr, dtype=own[name].dtype)

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param_hash(params):
    """SHA-256 over (name, bytes) of a name -> Parameter/array mapping."""
    h = hashlib.sha256()
    for name, p in params:
        arr = p.data if isinstance(p, Tensor) else p
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (n_in, n_out)))
        if bias:
            self.bias = Parameter(np.zeros(n_out))
        self.has_bias = bias

    def forward(self, x):
        if x.ndim == 1:
            y = T.matmul(T.reshape(x, (1, -1)), self.weight)
            y = T.reshape(y, (-1,))
        else:
            y = x @ self.weight
        return y + self.bias if self.has_bias else y


class Conv3d(Module):
    def __init__(self, c_in, c_out, rng, k=3, stride=1, padding=None):
        fan_in = c_in * k ** 3
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, k, k, k)))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x):
        return T.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    def __init__(self, c_in, c_out, rng):
        self.weight = Parameter(rng.normal(0.0, np.sqrt(1.0 / c_in), (c_in, c_out, 2, 2, 2)))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        return T.conv_transpose3d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Dropout(Module):
    """Dropout driven by a counter-based (Philox) stream.

    Call ``i`` draws from ``Philox(key=(seed, i))`` so train-mode passes are
    reproducible given the seed and the number of prior calls.
    """

    def __init__(self, p, seed=0):
        self.p = float(p)
        self.seed = int(seed)
        self.counter = 0

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        rng = np.random.Generator(np.random.Philox(key=[self.seed, self.counter]))
        self.counter += 1
        return T.dropout(x, self.p, rng, training=True)

    def reset(self, counter=0):
        self.counter = counter
