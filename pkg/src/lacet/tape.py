"""Dense tensors with a minimal reverse-mode tape.

Values are numpy arrays. Every operation records its parent tensors and a
vector-Jacobian closure, so a scalar output can be differentiated with
respect to any leaf by one reverse sweep. The graph is implicit in the
parent links; `reverse_gradients` recovers a topological order on demand.

Geometry and preprocessing code in this package works on raw numpy; only
the model path pays for the tape. Wrap inference in `no_grad()` to skip
recording entirely.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True


def set_default_dtype(dtype) -> None:
    """Set the dtype new tensors are coerced to (float32 or float64)."""
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus the tape links that produced it."""

    __slots__ = ("data", "parents", "vjp")

    def __init__(self, data, parents=(), vjp=None):
        if not isinstance(data, np.ndarray) or data.dtype != DEFAULT_DTYPE:
            data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = data
        if _grad_enabled:
            self.parents = parents
            self.vjp = vjp
        else:
            self.parents = ()
            self.vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        return f"Tensor({self.data!r})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return take(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, vjp) -> Tensor:
    """Internal constructor: trusts `data` dtype, honors grad mode."""
    t = Tensor.__new__(Tensor)
    t.data = data
    if _grad_enabled:
        t.parents = parents
        t.vjp = vjp
    else:
        t.parents = ()
        t.vjp = None
    return t


def constant(data) -> Tensor:
    """A leaf tensor holding data that is never trained."""
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic primitives ----------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape),
                            _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape),
                            _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * out / b.data, b.data.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def _sum_leading(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum away broadcast batch axes of a stacked matmul gradient."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for i in range(g.ndim - 2):
        if shape[i] == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D, or stacked with numpy batch semantics."""
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise ValueError("matmul needs at least 1-D operands")
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        if a.data.ndim == 1 and b.data.ndim == 1:
            return g * b.data, g * a.data
        if b.data.ndim == 1:  # (..., m, k) @ (k,) -> (..., m)
            ga = g[..., None] * b.data
            gb = (a.data * g[..., None]).sum(axis=tuple(range(a.data.ndim - 1)))
            return ga, gb
        if a.data.ndim == 1:  # (k,) @ (..., k, n) -> (..., n)
            ga = (g[..., None, :] * b.data).sum(axis=tuple(range(b.data.ndim - 2)) + (-1,))
            gb = a.data[:, None] * g[..., None, :]
            return ga, _sum_leading(gb, b.data.shape)
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return _sum_leading(ga, a.data.shape), _sum_leading(gb, b.data.shape)

    return _make(out, (a, b), vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    if axes is None:
        back = None
    else:
        back = tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: (np.transpose(g, back),))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    orig = a.data.shape
    return _make(out, (a,), lambda g: (g.reshape(orig),))


def take(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _make(out, (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tuple(parts),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- elementwise nonlinearities -------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),))


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    out = a.data * s
    return _make(out, (a,), lambda g: (g * (s * (1.0 + a.data * (1.0 - s))),))


def softplus(a: Tensor) -> Tensor:
    out = _softplus_np(a.data)
    return _make(out, (a,), lambda g: (g * _sigmoid_np(a.data),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "silu": silu,
    "sigmoid": sigmoid,
    "softplus": softplus,
}


def elementwise_activations(x: Tensor, kind: str) -> Tensor:
    """Apply one of {silu, sigmoid, softplus} per element."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(_wrap(x))


# -- composites -----------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) * gain + bias over the last axis."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = tmean(x, axis=-1, keepdims=True)
    c = x - mu
    var = tmean(c * c, axis=-1, keepdims=True)
    return c / sqrt(var + eps) * gain + bias


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Rows rescaled to unit L2 norm; zero rows map to zero (eps guard)."""
    x = _wrap(x)
    n = sqrt(tsum(x * x, axis=axis, keepdims=True) + eps)
    return x / n


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax; the max shift is a constant and carries no gradient."""
    shift = constant(np.max(x.data, axis=axis, keepdims=True))
    e = exp(x - shift)
    return e / tsum(e, axis=axis, keepdims=True)


# -- reverse sweep ---------------------------------------------------------

def reverse_gradients(output: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar `output` with respect to each leaf tensor.

    Leaves that do not appear in the graph get zero gradients. Duplicated
    leaves receive the same accumulated array.
    """
    if output.data.size != 1:
        raise ValueError("reverse_gradients needs a scalar output")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaf_ids = {id(t) for t in leaves}
    for node in reversed(topo):
        nid = id(node)
        if nid in leaf_ids:
            g = grads.get(nid)
        else:
            g = grads.pop(nid, None)
        if g is None or node.vjp is None:
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            pid = id(p)
            acc = grads.get(pid)
            if acc is None:
                grads[pid] = pg if pg.shape == p.data.shape else np.broadcast_to(pg, p.data.shape).copy()
            else:
                grads[pid] = acc + pg

    return [grads.get(id(t), np.zeros_like(t.data)) for t in leaves]


def finite_diff_oracle(f: Callable[[np.ndarray], float], x: np.ndarray,
                       h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, per coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
