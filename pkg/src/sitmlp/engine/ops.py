"""Differentiable primitives.

Every function takes :class:`Tensor` inputs (python scalars are promoted),
computes the forward value with numpy and registers a backward closure on
the active tape. Gradients of broadcast operands are summed back to the
operand's shape.
"""

from __future__ import annotations

import contextlib
import math
from typing import Optional, Sequence

import numpy as np

from ..exceptions import DataError, ShapeError
from .tensor import Tensor, emit

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


class FlopCounter:
    """Accumulates 2*m*k*n for every matmul executed while active."""

    def __init__(self):
        self.total = 0
        self.calls = []

    def add(self, flops: int, label: str) -> None:
        self.total += flops
        self.calls.append((label, flops))


_counters: list[FlopCounter] = []


@contextlib.contextmanager
def count_matmul_flops():
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    return emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    return emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    return emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return emit(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def elementwise(op: str, a, b) -> Tensor:
    """Dispatch ``add``/``sub``/``mul`` by name."""
    try:
        fn = {"add": add, "sub": sub, "mul": mul, "div": div}[op]
    except KeyError:
        raise ShapeError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def neg(x: Tensor) -> Tensor:
    return emit("neg", -x.data, (x,), lambda g: (-g,))


def pow_scalar(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    return emit(
        "pow",
        x.data**exponent,
        (x,),
        lambda g: (g * exponent * x.data ** (exponent - 1.0),),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


# -- activations -----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    v = x.data
    v2 = v * v
    th = np.tanh(_SQRT_2_OVER_PI * v * (1.0 + _GELU_CUBIC * v2))
    out = 0.5 * v * (1.0 + th)

    def backward(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * d_inner),)

    return emit("gelu", out, (x,), backward)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return emit("softmax", out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return emit("log_softmax", out, (x,), backward)


def activation(kind: str, x: Tensor, axis: int = -1) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "softmax":
        return softmax(x, axis)
    raise ShapeError(f"unknown activation {kind!r}")


# -- contraction -----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading extents."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    if b.ndim == 2:
        # one big GEMM instead of a stack of small ones
        m_total = int(np.prod(a.shape[:-1]))
        a2 = a.data.reshape(m_total, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        flops = 2 * m_total * a.shape[-1] * b.shape[-1]

        def backward(g):
            g2 = g.reshape(m_total, b.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

    else:
        try:
            batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None
        out = np.matmul(a.data, b.data)
        m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
        flops = 2 * int(np.prod(batch, dtype=np.int64)) * m * k * n

        def backward(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
            return ga, gb

    for counter in _counters:
        counter.add(flops, "matmul")
    return emit("matmul", out, (a, b), backward)


# -- reductions ------------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = tuple(sorted(_check_axis(a, ndim) for a in axes))
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return out


def reduce(op: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes`` (all axes when None)."""
    axes = _norm_axes(axes, x.ndim)
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    count = int(np.prod([x.shape[i] for i in axes], dtype=np.int64))

    if op == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        scale = 1.0
    elif op == "mean":
        if count == 0:
            raise ShapeError("mean over an empty extent")
        out = x.data.mean(axis=axes, keepdims=keepdims)
        scale = 1.0 / count
    elif op == "max":
        if count == 0:
            raise ShapeError("max over an empty extent")
        return _max(x, axes, keepdims, kept_shape)[0]
    else:
        raise ShapeError(f"unknown reduction {op!r}")

    out = np.asarray(out, dtype=x.dtype)

    def backward(g):
        g = np.reshape(g, kept_shape)
        return (np.broadcast_to(g * scale, x.shape).astype(x.dtype),)

    return emit(op, out, (x,), backward)


def _max(x: Tensor, axes: tuple, keepdims: bool, kept_shape: tuple) -> Tensor:
    # Move reduced axes to the end and flatten them so argmax is a single index.
    rest = tuple(i for i in range(x.ndim) if i not in axes)
    moved = np.transpose(x.data, rest + axes)
    flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
    idx = np.argmax(flat, axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = vals.reshape(kept_shape) if keepdims else vals

    def backward(g):
        g = np.reshape(g, idx.shape)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(rest + axes)),)

    return emit("max", np.asarray(out, dtype=x.dtype), (x,), backward), idx


def max_with_indices(x: Tensor, axes=None, keepdims: bool = False) -> tuple:
    """Max reduction that also returns the flat argmax over the reduced axes."""
    axes = _norm_axes(axes, x.ndim)
    if any(x.shape[i] == 0 for i in axes):
        raise ShapeError("max over an empty extent")
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    return _max(x, axes, keepdims, kept_shape)


# -- shape manipulation ---------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = np.argsort([a % x.ndim for a in axes])
    return emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from None
    return emit("broadcast_to", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return emit("getitem", np.array(out, dtype=x.dtype), (x,), backward)


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def split(x: Tensor, sections: int = 2, axis: int = -1) -> tuple:
    """Split into ``sections`` equal contiguous pieces along ``axis``."""
    axis = _check_axis(axis, x.ndim)
    n = x.shape[axis]
    if n % sections:
        raise ShapeError(f"extent {n} on axis {axis} is not divisible into {sections} parts")
    step = n // sections
    pieces = []
    for i in range(sections):
        index = [slice(None)] * x.ndim
        index[axis] = slice(i * step, (i + 1) * step)
        pieces.append(getitem(x, tuple(index)))
    return tuple(pieces)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    axis = _check_axis(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        grads = []
        for i in range(len(tensors)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            grads.append(g[tuple(index)])
        return tuple(grads)

    return emit("concat", out, tensors, backward)


def unfold_time(x: Tensor, kernel: int, dilation: int = 1, stride: int = 1,
                pad: int = 0, pad_value: float = 0.0, axis: int = 1) -> Tensor:
    """Gather sliding windows along ``axis``.

    Returns a tensor with ``axis`` replaced by the number of windows and a new
    trailing-adjacent window axis inserted right before the last axis, i.e. for
    ``[B, T, V, C]`` input the output is ``[B, T', V, kernel, C]``.
    """
    axis = _check_axis(axis, x.ndim)
    if x.ndim < 2 or axis == x.ndim - 1:
        raise ShapeError("unfold_time needs a channel axis after the time axis")
    if kernel < 1 or dilation < 1 or stride < 1 or pad < 0:
        raise ShapeError(f"invalid window k={kernel} d={dilation} s={stride} pad={pad}")
    t_in = x.shape[axis]
    span = dilation * (kernel - 1) + 1
    t_out = (t_in + 2 * pad - span) // stride + 1
    if t_out < 1:
        raise ShapeError(f"window span {span} exceeds padded length {t_in + 2 * pad}")

    widths = [(0, 0)] * x.ndim
    widths[axis] = (pad, pad)
    xp = np.pad(x.data, widths, constant_values=pad_value) if pad else x.data

    def window(j):
        index = [slice(None)] * x.ndim
        start = j * dilation
        index[axis] = slice(start, start + stride * (t_out - 1) + 1, stride)
        return tuple(index)

    out = np.stack([xp[window(j)] for j in range(kernel)], axis=-2)

    def backward(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for j in range(kernel):
            gp[window(j)] += g[..., j, :]
        if pad:
            index = [slice(None)] * x.ndim
            index[axis] = slice(pad, pad + t_in)
            gp = gp[tuple(index)]
        return (gp,)

    return emit("unfold_time", out, (x,), backward)


# -- loss ------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, K], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = logits.shape
    if labels.shape[0] != b:
        raise ShapeError(f"{labels.shape[0]} labels for batch of {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(b), labels]
    loss = np.asarray((lse - picked).mean(), dtype=logits.dtype)

    def backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(b), labels] -= 1.0
        return (probs * (g / b),)

    return emit("cross_entropy", loss, (logits,), backward)
