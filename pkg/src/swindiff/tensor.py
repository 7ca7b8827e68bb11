"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operation set the denoiser needs is provided. Every op builds a
node holding its parents and a closure that pushes the output gradient back
to them; :meth:`Tensor.backward` walks the graph in reverse topological order.

Feature maps are channels-last: ``(B, H, W, L, C)``.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from . import _accel

_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


def _shape_error(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- autodiff -----------------------------------------------------------
    def backward(self, retain_graph: bool = False) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward: loss must be a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward: loss does not depend on any tensor requiring grad")
        order = _topological(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        if not retain_graph:
            for node in order:
                if node._parents:
                    node._parents = ()
                    node._backward = None
                    if node is not self:
                        node.grad = None

    # -- operator overloads -------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a.data, b.data)

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a.data, b.data)

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("div", a.data, b.data)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        a._accum(g * p * a.data ** (p - 1))

    return _make(a.data ** p, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: a._accum(g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: a._accum(g / a.data))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: a._accum(g * np.sign(a.data)))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: a._accum(g * (1.0 - out * out)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: a._accum(g * out * (1.0 - out)))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        a._accum(g * s * (1.0 + a.data * (1.0 - s)))

    return _make(a.data * s, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a, approximate: str = "tanh") -> Tensor:
    """GELU; ``approximate="tanh"`` (default) or ``"none"`` for the erf form."""
    a = as_tensor(a)
    x = a.data
    if approximate == "tanh":
        u = _GELU_C * (x + 0.044715 * x ** 3)
        t = np.tanh(u)
        out = 0.5 * x * (1.0 + t)

        def bw(g):
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            a._accum(g * d)
    elif approximate == "none":
        cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        out = x * cdf

        def bw(g):
            pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
            a._accum(g * (cdf + x * pdf))
    else:
        raise ValueError(f"gelu: unknown approximation {approximate!r}")
    return _make(out, (a,), bw)


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` against a constant floor."""
    a = as_tensor(a)
    keep = a.data > floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: a._accum(g * keep))


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.where(mask, 0.0, g), b.shape))

    return _make(np.where(mask, a.data, b.data), (a, b), bw)


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None
    return _make(out, (a,), lambda g: a._accum(g.reshape(a.shape)))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: a._accum(g.transpose(inv)))


def roll(a, shift, axis) -> Tensor:
    """Cyclic shift; ``shift`` and ``axis`` may be tuples as in ``np.roll``."""
    a = as_tensor(a)
    neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return _make(np.roll(a.data, shift, axis), (a,), lambda g: a._accum(np.roll(g, neg, axis)))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise _shape_error("concat", ts[0].shape, t.shape)
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        for t, part in zip(ts, np.split(g, sizes, axis=ax)):
            t._accum(part)

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice)) or i is Ellipsis or i is None for i in items)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        a._accum(full)

    return _make(a.data[idx], (a,), bw)


# --------------------------------------------------------------------------
# linear algebra and network primitives
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            b._accum(gb)

    return _make(out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is ``(in, out)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise _shape_error("linear", x.shape, weight.shape)
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (a,), bw)


def conv3d(x, weight, bias=None) -> Tensor:
    """Stride-1 3D convolution with zero padding preserving spatial extent.

    ``x`` is ``(B, H, W, L, Cin)``; ``weight`` is ``(k, k, k, Cin, Cout)`` with odd k.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5 or weight.ndim != 5 or x.shape[-1] != weight.shape[3]:
        raise _shape_error("conv3d", x.shape, weight.shape)
    k = weight.shape[0]
    if k % 2 != 1 or weight.shape[1] != k or weight.shape[2] != k:
        raise _shape_error("conv3d", x.shape, weight.shape)
    p = k // 2
    if k == 1:
        return linear(x, weight.reshape(weight.shape[3], weight.shape[4]), bias)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    out = _accel.conv3d_forward(xp, weight.data)

    def bw(g):
        if x.requires_grad:
            gxp = _accel.conv3d_backward_input(g, weight.data)
            x._accum(gxp[:, p:-p, p:-p, p:-p, :])
        if weight.requires_grad:
            weight._accum(_accel.conv3d_backward_weight(xp, g, k))

    y = _make(out, (x, weight), bw)
    return y if bias is None else add(y, bias)


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Group normalization over channels-last input ``(B, ..., C)``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if C % groups != 0:
        raise ShapeError(f"group_norm: {C} channels not divisible into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise _shape_error("group_norm", x.shape, gamma.shape)
    B = x.shape[0]
    xg = x.data.reshape(B, -1, groups, C // groups)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    var = xg.var(axis=(1, 3), keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * rstd
    xhat_full = xhat.reshape(x.shape)
    out = xhat_full * gamma.data + beta.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gamma._accum((g * xhat_full).sum(axis=red))
        if beta.requires_grad:
            beta._accum(g.sum(axis=red))
        if x.requires_grad:
            gh = (g * gamma.data).reshape(xg.shape)
            m1 = gh.mean(axis=(1, 3), keepdims=True)
            m2 = (gh * xhat).mean(axis=(1, 3), keepdims=True)
            x._accum((rstd * (gh - m1 - xhat * m2)).reshape(x.shape))

    return _make(out, (x, gamma, beta), bw)


def resample_axis(x, matrix: np.ndarray, axis: int) -> Tensor:
    """Apply a fixed linear map ``(out, in)`` along one axis (interpolation)."""
    x = as_tensor(x)
    if matrix.shape[1] != x.shape[axis]:
        raise _shape_error("resample_axis", x.shape, matrix.shape)
    moved = np.moveaxis(x.data, axis, -1)
    out = np.moveaxis(moved @ matrix.T, -1, axis)

    def bw(g):
        gm = np.moveaxis(g, axis, -1) @ matrix
        x._accum(np.moveaxis(gm, -1, axis))

    return _make(np.ascontiguousarray(out), (x,), bw)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)
