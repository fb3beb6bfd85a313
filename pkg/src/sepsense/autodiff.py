"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Everything the imputation and risk models need, and nothing more: dense
layers, an LSTM cell, elementwise nonlinearities, dropout, gradients with
respect to parameters *and* inputs, plain/adaptive optimizers, and a binary
snapshot format for parameter arrays.

The graph is recorded eagerly as operations run. Calling ``backward`` on a
scalar walks the tape in reverse topological order and accumulates ``grad``
on every node that requires gradients. Inference paths should run inside
``no_grad()`` so no tape is recorded.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager

import numpy as np

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording for the enclosed block (per-thread)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Value:
    """A float64 array node in the computation graph.

    `data` and `grad` (once backward has run) always share a shape.
    `requires_grad=True` marks parameters and inputs whose gradients are
    wanted; derived nodes inherit the flag from their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # force `ndarray <op> Value` through the reflected Value operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_value(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data: np.ndarray, parents: tuple, backward) -> Value:
    """Create a derived node; constants stay off the tape."""
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Value(data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward = backward
    return out


# -- primitive operations ------------------------------------------------


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    data = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), backward)


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    data = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(data, (a, b), backward)


def matmul(a: Value, b: Value) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return _make(data, (a, b), backward)


def concat(values, axis: int = -1) -> Value:
    values = [as_value(v) for v in values]
    data = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.data.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(values))
        )

    return _make(data, tuple(values), backward)


def chunk(v: Value, n: int, axis: int = -1):
    """Split into n equal slices along `axis`."""
    size = v.data.shape[axis]
    if size % n != 0:
        raise ValueError(f"cannot chunk axis of size {size} into {n} parts")
    step = size // n
    outs = []
    for i in range(n):
        idx = [slice(None)] * v.data.ndim
        idx[axis] = slice(i * step, (i + 1) * step)
        idx = tuple(idx)

        def backward(g, idx=idx):
            full = np.zeros_like(v.data)
            full[idx] = g
            return (full,)

        outs.append(_make(v.data[idx], (v,), backward))
    return outs


def transpose(v: Value) -> Value:
    v = as_value(v)
    if v.data.ndim != 2:
        raise ValueError(f"transpose expects a 2-D value, got {v.data.shape}")

    def backward(g):
        return (g.T,)

    return _make(v.data.T, (v,), backward)


def narrow(v: Value, axis: int, start: int, length: int) -> Value:
    """Contiguous slice [start, start+length) along `axis`."""
    v = as_value(v)
    idx = [slice(None)] * v.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(v.data)
        full[idx] = g
        return (full,)

    return _make(v.data[idx], (v,), backward)


def sigmoid(v) -> Value:
    v = as_value(v)
    out = np.empty_like(v.data)
    pos = v.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v.data[pos]))
    ez = np.exp(v.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (v,), backward)


def tanh(v) -> Value:
    v = as_value(v)
    out = np.tanh(v.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (v,), backward)


def relu(v) -> Value:
    v = as_value(v)
    out = np.maximum(v.data, 0.0)

    def backward(g):
        return (g * (v.data > 0.0),)

    return _make(out, (v,), backward)


def log(v) -> Value:
    v = as_value(v)
    data = np.log(v.data)

    def backward(g):
        return (g / v.data,)

    return _make(data, (v,), backward)


def absolute(v) -> Value:
    v = as_value(v)
    data = np.abs(v.data)

    def backward(g):
        return (g * np.sign(v.data),)

    return _make(data, (v,), backward)


def clamp(v, lo: float | None = None, hi: float | None = None) -> Value:
    """Clamp with zero gradient outside the open interval."""
    v = as_value(v)
    data = np.clip(v.data, lo, hi)
    inside = np.ones_like(v.data, dtype=bool)
    if lo is not None:
        inside &= v.data > lo
    if hi is not None:
        inside &= v.data < hi

    def backward(g):
        return (g * inside,)

    return _make(data, (v,), backward)


def vsum(v, axis=None) -> Value:
    v = as_value(v)
    data = v.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, v.data.shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, v.data.shape).copy(),)

    return _make(data, (v,), backward)


def vmean(v, axis=None) -> Value:
    v = as_value(v)
    n = v.data.size if axis is None else v.data.shape[axis]
    return mul(vsum(v, axis=axis), 1.0 / n)


def dropout(v, rate: float, rng: np.random.Generator) -> Value:
    """Zero entries independently with probability `rate`; scale survivors.

    rate=0 is the identity. The mask is a pure function of `rng`'s state,
    so an identically seeded generator reproduces it bit for bit.
    """
    v = as_value(v)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return v
    keep = (rng.random(v.data.shape) >= rate) / (1.0 - rate)
    return mul(v, keep)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """A reusable inverted-dropout mask (1/(1-rate) kept entries, else 0)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


# -- layers ---------------------------------------------------------------


def dense(x, weight: Value, bias: Value) -> Value:
    """x @ weight + bias with shape validation; accepts 1-D or 2-D x."""
    x = as_value(x)
    w, b = weight, bias
    if w.data.ndim != 2:
        raise ValueError(f"dense weight must be 2-D, got shape {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ValueError(
            f"dense bias shape {b.data.shape} does not match weight {w.data.shape}"
        )
    squeeze = x.data.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.data.shape[0]))
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"dense input shape {x.data.shape} does not match weight {w.data.shape}"
        )
    out = add(matmul(x, w), b)
    if squeeze:
        out = reshape(out, (w.data.shape[1],))
    return out


def reshape(v: Value, shape) -> Value:
    v = as_value(v)
    old = v.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(v.data.reshape(shape), (v,), backward)


def lstm_step(x, h, c, w_x: Value, w_h: Value, b: Value):
    """One LSTM step. Gate layout along the last axis is [i, f, g, o].

    x: (B, d) input, h/c: (B, H) state; w_x: (d, 4H), w_h: (H, 4H), b: (4H,).
    Returns (h', c').
    """
    x, h, c = as_value(x), as_value(h), as_value(c)
    hidden = w_h.data.shape[0]
    if w_x.data.shape[1] != 4 * hidden or b.data.shape != (4 * hidden,):
        raise ValueError(
            f"inconsistent LSTM parameter shapes: w_x {w_x.data.shape}, "
            f"w_h {w_h.data.shape}, b {b.data.shape}"
        )
    if h.data.shape[-1] != hidden or c.data.shape[-1] != hidden:
        raise ValueError(
            f"state dimensions {h.data.shape}/{c.data.shape} do not match "
            f"hidden size {hidden}"
        )
    gates = add(add(matmul(x, w_x), matmul(h, w_h)), b)
    gi, gf, gg, go = chunk(gates, 4, axis=-1)
    c2 = add(mul(sigmoid(gf), c), mul(sigmoid(gi), tanh(gg)))
    h2 = mul(sigmoid(go), tanh(c2))
    return h2, c2


# -- backward pass ---------------------------------------------------------


def backward(loss: Value) -> None:
    """Reverse-mode sweep from a scalar loss.

    Populates `.grad` on every reachable node with requires_grad. Gradients
    accumulate (like the underlying math demands when a node fans out), so
    leaves keep `.grad=None` until touched.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward is None:
        raise ValueError("backward requires a recorded forward pass")

    topo: list[Value] = []
    visited: set[int] = set()
    stack: list[tuple[Value, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None or p.requires_grad:
                if id(p) not in visited:
                    stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if not (parent.requires_grad or parent._backward is not None):
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


def zero_grads(params) -> None:
    for p in _iter_params(params):
        p.grad = None


def _iter_params(params):
    if isinstance(params, dict):
        return params.values()
    return params


# -- optimizers -------------------------------------------------------------


class SGD:
    """Plain gradient descent: w <- w - lr * grad. Zero grad leaves w alone."""

    def __init__(self, params, lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(_iter_params(params))
        self.lr = lr
        self.steps = 0

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise FloatingPointError("non-finite gradient; step rejected")
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad
        self.steps += 1

    def zero_grad(self) -> None:
        zero_grads(self.params)


class Adam:
    """Adaptive optimizer: momentum plus per-parameter scaling."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(_iter_params(params))
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise FloatingPointError("non-finite gradient; step rejected")
        self.steps += 1
        b1c = 1.0 - self.beta1 ** self.steps
        b2c = 1.0 - self.beta2 ** self.steps
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * p.grad
            self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * p.grad ** 2
            m_hat = self._m[i] / b1c
            v_hat = self._v[i] / b2c
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)


def uniform_init(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]; fan_in = shape[0]."""
    bound = 1.0 / np.sqrt(shape[0]) if len(shape) > 1 else 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


# -- parameter snapshots -----------------------------------------------------

_MAGIC = b"SPS1"
_VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays to a little-endian binary snapshot.

    Layout: magic, u32 version, u32 count, then per array (sorted by name):
    u32 name length, utf-8 name, u32 rank, u64 dims, row-major payload.
    """
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8", order="C")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a parameter snapshot: bad magic {magic!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(dims)
            out[name] = data.astype(np.float64).copy()
        return out
