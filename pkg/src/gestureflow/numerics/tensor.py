"""Minimal reverse-mode autodiff tape over numpy arrays.

Every differentiable value is a :class:`Tensor` holding a numpy array plus an
optional backward closure linking it to its parents. Gradients accumulate into
``Tensor.grad`` until explicitly zeroed; ``backward`` walks the recorded graph
in reverse topological order. Double precision is the intended dtype for
oracles and gradient checks, single precision for training loops.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "as_tensor",
    "backward",
    "finite_checks",
    "graph_nodes",
    "matmul",
    "linear",
    "softmax_rows",
    "layer_norm",
    "conv1d",
    "gelu",
    "gather_rows",
    "concat",
    "transpose",
    "reshape",
    "tsum",
    "tmean",
    "stop_gradient",
    "stop_gradient_replace",
]


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


_FINITE_CHECKS = True


@contextmanager
def finite_checks(enabled: bool):
    """Temporarily enable/disable per-op NaN/Inf guards (default: enabled)."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _guard(data: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tensor:
    """A node in the computation graph.

    Leaf tensors created with ``requires_grad=True`` act as parameters;
    operation outputs record their parents and a backward closure. ``grad``
    buffers accumulate across backward passes until ``zero_grad`` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        _guard(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # -- gradient bookkeeping ------------------------------------------------

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar --------------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype)
    return Tensor(arr)


def _make(
    data: np.ndarray,
    parents: Sequence[Tensor],
    bwd: Callable[[np.ndarray], None],
    op: str,
) -> Tensor:
    out = Tensor.__new__(Tensor)
    _guard(data, op)
    out.data = data
    out.grad = None
    out.op = op
    grad_parents = tuple(p for p in parents if p.requires_grad or p._parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    if grad_parents:
        out._parents = tuple(parents)
        out._backward = bwd
    else:
        out._parents = ()
        out._backward = None
    return out


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Populates ``grad`` on every reachable tensor with ``requires_grad``.
    Gradients accumulate across calls; callers zero them between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = graph_nodes(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            node.accumulate_grad(g)
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (parent.requires_grad or parent._parents):
                continue
            buf = grads.get(id(parent))
            # never mutate stored buffers in place: closures may hand the same
            # array object to several parents
            grads[id(parent)] = pg if buf is None else buf + pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "scale")
    if isinstance(a, (int, float)):
        return mul(b, a)
    a = as_tensor(a)
    b = as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bwd, "mul")


def matmul(a, b) -> Tensor:
    """Stacked matrix product over the last two axes, exact adjoints."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), bwd, "matmul")


def linear(x, w, b) -> Tensor:
    """Fused affine map ``x @ w + b`` (one graph node)."""
    x = as_tensor(x)
    w = as_tensor(w)
    b = as_tensor(b)
    data = x.data @ w.data + b.data

    def bwd(g):
        gx = g @ w.data.T
        lead = g.reshape(-1, g.shape[-1])
        gw = x.data.reshape(-1, x.shape[-1]).T @ lead
        return gx, gw, lead.sum(axis=0)

    return _make(data, (x, w, b), bwd, "linear")


# -- shape manipulation ----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    src = a.shape
    return _make(data, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(parts), bwd, "concat")


def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]`` routing gradients back via scatter-add."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    data = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(data, (table,), bwd, "gather_rows")


# -- reductions ----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.shape).copy(),)

    return _make(np.asarray(data), (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- neural-net kernels ----------------------------------------------------------


def softmax_rows(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted)."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), bwd, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    gain = as_tensor(gain)
    bias = as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs feature dimension > 1")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        gg = _unbroadcast(g * xhat, gain.shape)
        gb = _unbroadcast(g, bias.shape)
        gy = g * gain.data
        # d/dx of (x - mean) * inv with mean/var functions of x
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True) - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(data, (x, gain, bias), bwd, "layer_norm")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (smooth everywhere, exact adjoint of the approx)."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * (v + 0.044715 * (v2 * v)))
    data = 0.5 * v * (1.0 + t)

    def bwd(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 0.134145 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * d_inner),)

    return _make(data, (x,), bwd, "gelu")


def _same_pad(t: int, k: int, stride: int) -> tuple[int, int, int]:
    t_out = -(-t // stride)
    total = max((t_out - 1) * stride + k - t, 0)
    left = total // 2
    return t_out, left, total - left


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Temporal convolution with SAME padding; output length ceil(T/stride).

    ``x`` is (T, c_in) or (B, T, c_in); ``kernels`` is (width, c_in, c_out).
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    squeeze = x.data.ndim == 2
    xb = x.data[None] if squeeze else x.data
    if xb.ndim != 3 or kernels.data.ndim != 3:
        raise ShapeError("conv1d expects (B,T,c_in) input and (k,c_in,c_out) kernels")
    b_, t, c_in = xb.shape
    k, kc_in, c_out = kernels.shape
    if kc_in != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {c_in}, kernel {kc_in}")
    if t < k:
        raise ShapeError(f"kernel of width {k} wider than input of length {t}")
    t_out, pl, pr = _same_pad(t, k, stride)
    xp = np.pad(xb, ((0, 0), (pl, pr), (0, 0)))
    win = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[:, win, :]  # (B, T', k, c_in)
    w2 = kernels.data.reshape(k * c_in, c_out)
    out = cols.reshape(b_ * t_out, k * c_in) @ w2
    out = out.reshape(b_, t_out, c_out)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    data = out[0] if squeeze else out

    def bwd(g):
        gb3 = g[None] if squeeze else g
        g2 = gb3.reshape(b_ * t_out, c_out)
        gw = (cols.reshape(b_ * t_out, k * c_in).T @ g2).reshape(k, c_in, c_out)
        gcols = (g2 @ w2.T).reshape(b_, t_out, k, c_in)
        gxp = np.zeros_like(xp)
        np.add.at(gxp, (slice(None), win), gcols)
        gx = gxp[:, pl : pl + t, :]
        gx = gx[0] if squeeze else gx
        if bias is None:
            return gx, gw
        return gx, gw, gb3.sum(axis=(0, 1))

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(data, parents, bwd, "conv1d")


def upsample2_linear(x: Tensor) -> Tensor:
    """Temporal 2x upsample with midpoint interpolation on axis -2.

    out[2i] = x[i], out[2i+1] = (x[i] + x[i+1]) / 2 (last frame repeats).
    Avoids the staircase a nearest-neighbor repeat leaves in decoded motion.
    """
    x = as_tensor(x)
    v = x.data
    t = v.shape[-2]
    nxt = np.concatenate([v[..., 1:, :], v[..., -1:, :]], axis=-2)
    out = np.empty(v.shape[:-2] + (2 * t, v.shape[-1]), dtype=v.dtype)
    out[..., 0::2, :] = v
    out[..., 1::2, :] = 0.5 * (v + nxt)

    def bwd(g):
        even = g[..., 0::2, :]
        odd = g[..., 1::2, :]
        gx = even + 0.5 * odd
        gx[..., 1:, :] += 0.5 * odd[..., :-1, :]
        gx[..., -1, :] += 0.5 * odd[..., -1, :]
        return (gx,)

    return _make(out, (x,), bwd, "upsample2_linear")


# -- gradient routing ----------------------------------------------------------


def stop_gradient(a: Tensor) -> Tensor:
    """Detach: same data, no gradient flows back."""
    a = as_tensor(a)
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.grad = None
    out.requires_grad = False
    out.op = "stop_gradient"
    out._parents = ()
    out._backward = None
    return out


def stop_gradient_replace(a: Tensor, b: Tensor) -> Tensor:
    """Straight-through estimator: forward ``b``, route gradients to ``a``."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"stop_gradient_replace shapes differ: {a.shape} vs {b.shape}")
    return _make(b.data, (a,), lambda g: (g,), "stop_gradient_replace")
