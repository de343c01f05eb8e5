"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a vector-Jacobian
closure on the output tensor.  Outputs carry a monotonically increasing
sequence number, so the set of tensors reachable from a loss, ordered by
sequence number, is the computation tape; ``backward`` replays it in reverse.

Two precision modes exist: ``float64`` for verification (finite-difference
checks, oracle comparisons) and ``float32`` for training.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view  # noqa: F401  (re-exported for oracles)

_state = {"dtype": np.float32, "grad": True}
_seq = itertools.count()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextmanager
def precision(mode):
    """Temporarily set the default dtype: ``"float32"`` or ``"float64"``."""
    dtype = {"float32": np.float32, "float64": np.float64}[str(mode)]
    old = _state["dtype"]
    _state["dtype"] = dtype
    try:
        yield dtype
    finally:
        _state["dtype"] = old


def set_precision(mode):
    _state["dtype"] = {"float32": np.float32, "float64": np.float64}[str(mode)]


def default_dtype():
    return _state["dtype"]


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def grad_enabled():
    return _state["grad"]


class Tensor:
    """N-dimensional real array with an optional gradient."""

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._vjp = None
        self._seq = next(_seq)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self, order="tape"):
        """Populate ``grad`` on every tensor upstream of this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        nodes = _tape_order(self) if order == "tape" else _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topological_order(root):
    """Reverse post-order DFS; any valid order for gradient replay."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def _tape_order(root):
    """Upstream nodes sorted by creation sequence, newest first."""
    seen, stack, nodes = {id(root)}, [root], [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
                nodes.append(p)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    return nodes


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating) or arr.ndim == 0:
        arr = arr.astype(_state["dtype"])
    return Tensor(arr)


def _make(data, parents, vjp):
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    # np.maximum keeps NaN so a diverged input stays visible downstream
    return _make(np.maximum(a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """log(1 + e^x), computed without overflow."""
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data).astype(a.dtype), (a,),
                 lambda g: (g * _sigmoid(a.data),))


def signed_log(a, tau):
    """sign(d) * log(1 + |d| / tau); derivative 1 / (tau + |d|) is continuous at 0."""
    a = as_tensor(a)
    out = np.sign(a.data) * np.log1p(np.abs(a.data) / tau)
    return _make(out, (a,), lambda g: (g / (tau + np.abs(a.data)),))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick = a.data >= b.data
    return _make(np.maximum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick = a.data <= b.data
    return _make(np.minimum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)))


def absolute(a):
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- reductions -----------------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), vjp)


# -- shape ----------------------------------------------------------------
def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, idx):
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), vjp)


def concatenate(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    return _make(np.stack([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


# -- linear algebra -------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


# -- volumetric -----------------------------------------------------------
def conv3d(x, w, b=None, stride=1, padding=0):
    """Cross-correlate ``x`` (C_in,D,H,W) with ``w`` (C_out,C_in,k,k,k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 5 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"conv3d shape mismatch: input {x.shape}, kernel {w.shape}")
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise DimensionError(f"conv3d needs an odd cubic kernel, got {w.shape[2:]}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    s, p = int(stride), int(padding)
    out_dims = [(n + 2 * p - k) // s + 1 for n in x.shape[1:]]
    if min(out_dims) <= 0:
        raise DimensionError(f"conv3d output extent {out_dims} from input {x.shape}")
    Do, Ho, Wo = out_dims
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p)))

    def window(arr, i, j, l):
        return arr[:, i:i + s * (Do - 1) + 1:s, j:j + s * (Ho - 1) + 1:s, l:l + s * (Wo - 1) + 1:s]

    out = np.zeros((w.shape[0], Do, Ho, Wo), dtype=np.result_type(x.data, w.data))
    for i, j, l in itertools.product(range(k), repeat=3):
        out += np.tensordot(w.data[:, :, i, j, l], window(xp, i, j, l), axes=(1, 0))
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None, None, None]
        parents.append(b)

    def vjp(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for i, j, l in itertools.product(range(k), repeat=3):
            gw[:, :, i, j, l] = np.tensordot(g, window(xp, i, j, l), axes=([1, 2, 3], [1, 2, 3]))
            window(gxp, i, j, l)[...] += np.tensordot(w.data[:, :, i, j, l], g, axes=(0, 0))
        gx = gxp[:, p:p + x.shape[1], p:p + x.shape[2], p:p + x.shape[3]]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return tuple(grads)

    return _make(out, parents, vjp)


def conv_transpose3d(x, w, b=None):
    """Stride-2, kernel-2 transposed convolution: (C_in,D,H,W) -> (C_out,2D,2H,2W).

    ``w`` has shape (C_in, C_out, 2, 2, 2).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 5 or w.shape[0] != x.shape[0] or w.shape[2:] != (2, 2, 2):
        raise DimensionError(f"conv_transpose3d shape mismatch: input {x.shape}, kernel {w.shape}")
    C, D, H, W = x.shape
    O = w.shape[1]
    blocks = np.tensordot(w.data, x.data, axes=(0, 0))  # O,2,2,2,D,H,W
    out = blocks.transpose(0, 4, 1, 5, 2, 6, 3).reshape(O, 2 * D, 2 * H, 2 * W)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None, None]
        parents.append(b)

    def vjp(g):
        gb = g.reshape(O, D, 2, H, 2, W, 2).transpose(0, 2, 4, 6, 1, 3, 5)
        gx = np.tensordot(w.data, gb, axes=([1, 2, 3, 4], [0, 1, 2, 3]))
        gw = np.tensordot(x.data, gb, axes=([1, 2, 3], [4, 5, 6]))
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return tuple(grads)

    return _make(np.ascontiguousarray(out), parents, vjp)


def max_pool3d(x):
    """Window-2 stride-2 max pool on (C,D,H,W); odd trailing planes are dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """
    x = as_tensor(x)
    C, D, H, W = x.shape
    D2, H2, W2 = D // 2, H // 2, W // 2
    if min(D2, H2, W2) == 0:
        raise DimensionError(f"max_pool3d input too small: {x.shape}")
    blocks = (x.data[:, :2 * D2, :2 * H2, :2 * W2]
              .reshape(C, D2, 2, H2, 2, W2, 2)
              .transpose(0, 1, 3, 5, 2, 4, 6)
              .reshape(C, D2, H2, W2, 8))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(C, D2, H2, W2, 2, 2, 2).transpose(0, 1, 4, 2, 5, 3, 6).reshape(C, 2 * D2, 2 * H2, 2 * W2)
        full = np.zeros_like(x.data)
        full[:, :2 * D2, :2 * H2, :2 * W2] = gb
        return (full,)

    return _make(out, (x,), vjp)


# -- composites -----------------------------------------------------------
def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    return xc * power(var + eps, -0.5) * gamma + beta


def dropout(x, p, rng, training=True):
    """Inverted dropout; ``rng`` must be a seeded Generator."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits, targets, weights=None):
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    logp = log_softmax(logits, axis=-1)
    rows = np.arange(logits.shape[0])
    picked = index(logp, (rows, np.asarray(targets)))
    if weights is not None:
        w = np.asarray(weights, dtype=logp.dtype)
        return -(picked * w).sum() / float(w.sum())
    return -mean(picked)
