"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small tape-based engine: every operation builds a node holding its input
tensors and a closure that maps the output gradient to input gradients.
``Tensor.backward()`` walks the tape in reverse topological order.

All math is double precision.  Every operation validates that its output is
finite; a NaN/Inf anywhere raises :class:`NumericError` naming the operation,
so numerical failures surface at their source instead of ten layers later.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "NumericError",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "constant",
    "parameter",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "pad",
    "take_flat",
    "gather_rows",
    "upsample2x",
    "sum_",
    "mean_",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "gelu",
    "softmax",
    "layer_norm",
    "mse",
    "stop_gradient",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumericError(RuntimeError):
    """A forward or backward computation produced NaN/Inf."""

    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(f"non-finite values in operation '{op}'" + (f": {message}" if message else ""))


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(op)
    return arr


class Tensor:
    """A float64 array plus optional gradient and tape bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean_(self, axis=axis, keepdims=keepdims)

    # -- backward pass -------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar through the recorded tape."""
        if self.data.ndim != 0:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._vjp is None:
                # leaf parameter: accumulate
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                _check_finite(node.grad, f"backward:{node._op}")
                continue
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                _check_finite(pg, f"backward:{node._op}")
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = pg
                else:
                    grads[id(parent)] = acc + pg

    def zero_grad(self) -> None:
        self.grad = None


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad or p._vjp is not None for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _needs(t: Tensor) -> bool:
    """True when a gradient must be produced for this operand."""
    return t.requires_grad or t._vjp is not None


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data
    na, nb = _needs(a), _needs(b)

    def vjp(g):
        return (_sum_to_shape(g, a.shape) if na else None,
                _sum_to_shape(g, b.shape) if nb else None)

    return _make("add", data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data
    na, nb = _needs(a), _needs(b)

    def vjp(g):
        return (_sum_to_shape(g, a.shape) if na else None,
                _sum_to_shape(-g, b.shape) if nb else None)

    return _make("sub", data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    na, nb = _needs(a), _needs(b)

    def vjp(g):
        return (_sum_to_shape(g * b.data, a.shape) if na else None,
                _sum_to_shape(g * a.data, b.shape) if nb else None)

    return _make("mul", data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data
    na, nb = _needs(a), _needs(b)

    def vjp(g):
        ga = _sum_to_shape(g / b.data, a.shape) if na else None
        gb = _sum_to_shape(-g * a.data / (b.data * b.data), b.shape) if nb else None
        return ga, gb

    return _make("div", data, (a, b), vjp)


def pow_scalar(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    data = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make("pow", data, (a,), vjp)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _make("exp", data, (a,), vjp)


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make("log", data, (a,), vjp)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / data,)

    return _make("sqrt", data, (a,), vjp)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - data * data),)

    return _make("tanh", data, (a,), vjp)


def gelu(a) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF via erf."""
    a = _as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + _erf(x / _SQRT2))
    data = x * phi

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (phi + x * pdf),)

    return _make("gelu", data, (a,), vjp)


def stop_gradient(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(a.data)


# -- shape manipulation -------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _make("reshape", data, (a,), vjp)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _make("transpose", data, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", data, tuple(tensors), vjp)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice, type(Ellipsis), type(None))) for p in parts)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    data = a.data[idx]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)
    orig_shape = a.shape
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros(orig_shape, dtype=np.float64)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make("getitem", np.ascontiguousarray(data), (a,), vjp)


def pad(a, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` as for :func:`numpy.pad`."""
    a = _as_tensor(a)
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    data = np.pad(a.data, pad_width)
    slices = tuple(slice(lo, lo + s) for (lo, _), s in zip(pad_width, a.shape))

    def vjp(g):
        return (g[slices],)

    return _make("pad", data, (a,), vjp)


def take_flat(a, flat_idx: np.ndarray, out_shape: tuple[int, ...]) -> Tensor:
    """Gather from the flattened input by integer index; backward scatter-adds.

    The workhorse behind im2col convolution: ``flat_idx`` is precomputed per
    geometry, so the gather is a single fancy-indexing call.
    """
    a = _as_tensor(a)
    data = a.data.reshape(-1)[flat_idx].reshape(out_shape)
    n = a.data.size
    orig = a.shape

    def vjp(g):
        out = np.bincount(flat_idx.reshape(-1), weights=g.reshape(-1), minlength=n)
        return (out.reshape(orig),)

    return _make("take_flat", data, (a,), vjp)


def gather_rows(table, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of a 2-D table selected by an integer array."""
    table = _as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D table, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table with {table.shape[0]} rows")
    data = table.data[ids]
    v, d = table.shape

    def vjp(g):
        out = np.zeros((v, d), dtype=np.float64)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, d))
        return (out,)

    return _make("gather_rows", data, (table,), vjp)


def upsample2x(a) -> Tensor:
    """Nearest-neighbour 2x upsampling of the trailing two axes."""
    a = _as_tensor(a)
    data = a.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def vjp(g):
        s = g.shape
        g4 = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2))
        return (g4.sum(axis=(-3, -1)),)

    return _make("upsample2x", data, (a,), vjp)


# -- reductions ----------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    orig = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, orig).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, orig).copy(),)

    return _make("sum", np.asarray(data), (a,), vjp)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in ax]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- matrix multiply -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix multiply with numpy broadcasting of leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)
    na, nb = _needs(a), _needs(b)

    def vjp(g):
        ga = gb = None
        if na:
            ga = _sum_to_shape(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if nb:
            gb = _sum_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", data, (a, b), vjp)


# -- fused neural-net primitives ---------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((g - dot) * s,)

    return _make("softmax", s, (a,), vjp)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def vjp(g):
        gg = _sum_to_shape(g * xhat, gamma.shape)
        gb = _sum_to_shape(g, beta.shape)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make("layer_norm", data, (a, gamma, beta), vjp)


def mse(pred, target) -> Tensor:
    """Mean of elementwise squared differences (scalar)."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    data = np.asarray((diff * diff).mean())
    scale = 2.0 / pred.size
    np_, nt = _needs(pred), _needs(target)

    def vjp(g):
        gd = g * scale * diff
        return (gd if np_ else None), (-gd if nt else None)

    return _make("mse", data, (pred, target), vjp)
