"""Dense tensor type and the operation tape used for reverse-mode differentiation."""

from __future__ import annotations

import itertools
import os
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..exceptions import ContractError, ShapeError

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_node_ids = itertools.count()
_local = threading.local()
_debug = os.environ.get("SITMLP_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle finite-value checks after every forward op."""
    global _debug
    _debug = bool(flag)


def debug_enabled() -> bool:
    return _debug


def _as_float_array(data, dtype) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in SUPPORTED_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """An n-dimensional array that can take part in a recorded computation.

    Parameters
    ----------
    data : array_like
        Values, copied into a float32 or float64 buffer.
    requires_grad : bool
        Whether gradients should be accumulated for this tensor when it is a
        leaf of a recorded computation.
    dtype : numpy dtype, optional
        Storage precision. Defaults to the dtype of ``data`` when it is already
        a float32/float64 array and float64 otherwise.
    name : str, optional
        Label used in error messages and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in SUPPORTED_DTYPES:
            dtype = data.dtype
        self.data = _as_float_array(data, dtype or np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Arithmetic sugar; the implementations live in ops.
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __neg__(self):
        return ops.neg(self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __pow__(self, exponent: float):
        return ops.pow_scalar(self, exponent)

    def __getitem__(self, index):
        return ops.getitem(self, index)

    def sum(self, axes=None, keepdims: bool = False):
        return ops.reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return ops.reduce("mean", self, axes, keepdims)

    def max(self, axes=None, keepdims: bool = False):
        return ops.reduce("max", self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


class _Record:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward

    @property
    def input_ids(self) -> tuple:
        return tuple(t.node_id for t in self.inputs)


class Tape:
    """Ordered log of differentiable operations for a single forward pass.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended in execution order. Outside any
    tape nothing is recorded, which is how evaluation runs.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        for t in inputs:
            if t.requires_grad and t.node_id not in self._produced:
                self._leaves.setdefault(t.node_id, t)
        self.records.append(_Record(kind, inputs, output, backward))
        self._produced.add(output.node_id)

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(.) to every gradient-requiring leaf."""
        if self._consumed:
            raise ContractError("backward already ran on this tape; record a new forward pass")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id not in self._produced:
            raise ContractError("loss was not produced on this tape")
        for leaf in self._leaves.values():
            if leaf.grad is not None:
                raise ContractError(
                    f"leaf {leaf.name or leaf.node_id} still holds a gradient; reset it before backward"
                )
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(rec.output.node_id, None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi
        for node_id, leaf in self._leaves.items():
            g = grads.get(node_id)
            leaf.grad = np.zeros_like(leaf.data) if g is None else g.astype(leaf.dtype, copy=False)
        self.records.clear()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def emit(kind: str, data: np.ndarray, inputs: Iterable[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record it on the active tape if needed."""
    inputs = tuple(inputs)
    out = Tensor(data, dtype=data.dtype if data.dtype in SUPPORTED_DTYPES else None)
    if _debug and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise ContractError(f"non-finite values produced by {kind}")
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(kind, inputs, out, backward_fn)
    return out


def create(
    shape: Sequence[int],
    init="zeros",
    *,
    seed: Optional[int] = None,
    low: float = -1.0,
    high: float = 1.0,
    dtype=np.float64,
    requires_grad: bool = False,
    name: Optional[str] = None,
) -> Tensor:
    """Build a tensor of ``shape``.

    ``init`` is ``"zeros"``, ``"ones"``, ``"uniform"`` (seeded, on [low, high))
    or an explicit sequence of values laid out row-major.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in shape {shape}")
    n = int(np.prod(shape, dtype=np.int64))
    if isinstance(init, str):
        if init == "zeros":
            data = np.zeros(shape, dtype=dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=dtype)
        elif init == "uniform":
            rng = np.random.default_rng(seed)
            data = rng.uniform(low, high, size=shape).astype(dtype)
        else:
            raise ShapeError(f"unknown init {init!r}")
    else:
        values = np.asarray(init, dtype=dtype).reshape(-1)
        if values.size != n:
            raise ShapeError(f"{values.size} values cannot fill shape {shape}")
        data = values.reshape(shape)
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


from . import ops  # noqa: E402  (operator sugar on Tensor resolves here)
