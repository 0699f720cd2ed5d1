"""Minimal numpy-backed tensors with reverse-mode differentiation."""

from . import ops
from .gradcheck import grad_check, numerical_gradient
from .ops import count_matmul_flops
from .serialize import load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from .tensor import Tape, Tensor, backward, create, current_tape, set_debug

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "count_matmul_flops",
    "create",
    "current_tape",
    "grad_check",
    "load_tensor",
    "numerical_gradient",
    "ops",
    "save_tensor",
    "set_debug",
    "tensor_from_bytes",
    "tensor_to_bytes",
]
