"""Layer vocabulary of the network: channel/spatial projections, temporal
convolution and pooling, batch normalization, and their initializers.

All feature maps are channels-last, ``[B, T, V, C]``.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from .engine import ops
from .engine.tensor import Tensor
from .exceptions import ConfigError, ContractError, ShapeError


class Parameter(Tensor):
    """A learnable tensor. ``decay`` marks it for weight decay."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = True, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)
        self.decay = decay


class Module:
    """Container that tracks parameters, buffers and child modules in
    registration order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = None
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix):
            for name in mod._params:
                yield (f"{mod_name}.{name}" if mod_name else name), getattr(mod, name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for name in mod._buffers:
                yield (f"{mod_name}.{name}" if mod_name else name), getattr(mod, name)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update((n, b) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        modules = dict(self.named_modules())
        for key, value in state.items():
            mod_name, _, attr = key.rpartition(".")
            mod = modules[mod_name]
            current = getattr(mod, attr)
            arr = np.asarray(value)
            cur_arr = current.data if isinstance(current, Tensor) else current
            if arr.shape != cur_arr.shape:
                raise ShapeError(f"{key}: checkpoint shape {arr.shape} != model shape {cur_arr.shape}")
            cur_arr[...] = arr

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for i, m in enumerate(modules):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return list(self._modules.values())[i]


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class ChannelLinear(Module):
    """Projection along the channel axis, applied independently at every
    joint and frame: ``out[..., :] = x[..., :] @ W + b``."""

    def __init__(self, c_in: int, c_out: int, bias: bool = True, dtype=np.float64, rng=None):
        super().__init__()
        if c_in < 1 or c_out < 1:
            raise ConfigError(f"channel counts must be positive, got {c_in}->{c_out}")
        self.c_in, self.c_out = c_in, c_out
        self.weight = Parameter(np.zeros((c_in, c_out), dtype=dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None
        init_params(self, "kaiming-uniform", rng=rng)

    @property
    def fan_in(self) -> int:
        return self.c_in

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.c_in:
            raise ShapeError(f"ChannelLinear expects {self.c_in} channels, got {x.shape[-1]}")
        out = ops.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out

    def flops(self, positions: int) -> int:
        return 2 * positions * self.c_in * self.c_out


class SpatialLinear(Module):
    """Joint-mixing projection with one V x V matrix per head.

    Channels are split into ``heads`` contiguous slices; head ``h`` mixes the
    joints of its slice with ``weight[h]``, independently for every frame and
    channel.
    """

    def __init__(self, joints: int, heads: int = 1, bias: bool = False, init: str = "identity",
                 dtype=np.float64, rng=None, adjacency=None):
        super().__init__()
        if joints < 1 or heads < 1:
            raise ConfigError(f"invalid SpatialLinear(joints={joints}, heads={heads})")
        self.joints, self.heads = joints, heads
        self.weight = Parameter(np.zeros((heads, joints, joints), dtype=dtype))
        self.bias = Parameter(np.zeros((heads, joints), dtype=dtype)) if bias else None
        init_params(self, init, rng=rng, adjacency=adjacency)

    @property
    def fan_in(self) -> int:
        return self.joints

    def forward(self, x: Tensor) -> Tensor:
        b, t, v, c = x.shape
        if v != self.joints:
            raise ShapeError(f"SpatialLinear expects {self.joints} joints, got {v}")
        if c % self.heads:
            raise ConfigError(f"{c} channels are not divisible by {self.heads} heads")
        h, ch = self.heads, c // self.heads
        # [B,T,V,H,Ch] -> [H,V,B*T*Ch] so each head is one GEMM
        xr = x.reshape(b, t, v, h, ch).transpose(3, 2, 0, 1, 4).reshape(h, v, b * t * ch)
        out = ops.matmul(self.weight, xr)
        if self.bias is not None:
            out = out + self.bias.reshape(h, v, 1)
        return out.reshape(h, v, b, t, ch).transpose(2, 3, 1, 0, 4).reshape(b, t, v, c)

    def flops(self, frames: int, channels: int) -> int:
        return 2 * self.joints * self.joints * frames * channels


def same_padding(kernel: int, dilation: int = 1) -> int:
    if kernel % 2 == 0:
        raise ConfigError(f"same padding needs an odd kernel, got {kernel}")
    return dilation * (kernel - 1) // 2


def conv_output_length(length: int, kernel: int, dilation: int = 1, stride: int = 1,
                       pad: Optional[int] = None) -> int:
    if pad is None:
        pad = same_padding(kernel, dilation)
    return (length + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


class TemporalConv(Module):
    """Per-joint 1-D convolution along frames with symmetric zero padding.

    ``weight`` has shape ``[C_out, C_in, k]``.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, dilation: int = 1, stride: int = 1,
                 bias: bool = True, dtype=np.float64, rng=None):
        super().__init__()
        if kernel < 1 or dilation < 1 or stride < 1:
            raise ConfigError(f"invalid temporal conv k={kernel} d={dilation} s={stride}")
        self.pad = same_padding(kernel, dilation)
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.dilation, self.stride = kernel, dilation, stride
        self.weight = Parameter(np.zeros((c_out, c_in, kernel), dtype=dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None
        init_params(self, "kaiming-uniform", rng=rng)

    @property
    def fan_in(self) -> int:
        return self.c_in * self.kernel

    def output_length(self, frames: int) -> int:
        return conv_output_length(frames, self.kernel, self.dilation, self.stride, self.pad)

    def forward(self, x: Tensor) -> Tensor:
        b, t, v, c = x.shape
        if c != self.c_in:
            raise ShapeError(f"TemporalConv expects {self.c_in} channels, got {c}")
        cols = ops.unfold_time(x, self.kernel, self.dilation, self.stride, self.pad)
        t_out = cols.shape[1]
        cols = cols.reshape(b, t_out, v, self.kernel * c)
        w = self.weight.transpose(2, 1, 0).reshape(self.kernel * c, self.c_out)
        out = ops.matmul(cols, w)
        return out + self.bias if self.bias is not None else out

    def flops(self, frames_out: int, joints: int) -> int:
        return 2 * self.c_out * self.c_in * self.kernel * frames_out * joints


def temporal_maxpool(x: Tensor, kernel: int, stride: int = 1) -> Tensor:
    """Windowed max along frames, padded with -inf so stride 1 keeps length."""
    if kernel < 1 or stride < 1:
        raise ConfigError(f"invalid max-pool k={kernel} s={stride}")
    pad = (kernel - 1) // 2
    cols = ops.unfold_time(x, kernel, 1, stride, pad, pad_value=-np.inf)
    return cols.max(axes=-2)


class BatchNorm(Module):
    """Normalization over every axis except the trailing channel axis."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.weight = Parameter(np.ones(channels, dtype=dtype), decay=False)
        self.bias = Parameter(np.zeros(channels, dtype=dtype), decay=False)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.channels:
            raise ShapeError(f"BatchNorm expects {self.channels} channels, got {x.shape[-1]}")
        axes = tuple(range(x.ndim - 1))
        if not self.training:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.astype(x.dtype)) * inv_std.astype(x.dtype)
            return xhat * self.weight + self.bias
        if x.shape[0] < 2:
            raise ContractError("BatchNorm in train mode needs a batch of at least 2")
        mean = x.mean(axes=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axes=axes, keepdims=True)
        xhat = centered * (var + self.eps) ** -0.5
        n = x.size // self.channels
        m = self.momentum
        self.running_mean[...] = (1 - m) * self.running_mean + m * mean.data.reshape(-1)
        self.running_var[...] = (1 - m) * self.running_var + m * var.data.reshape(-1) * n / max(n - 1, 1)
        return xhat * self.weight + self.bias


INIT_SCHEMES = ("kaiming-uniform", "identity", "zeros", "binary-graph")


def kaiming_bound(fan_in: int) -> float:
    return math.sqrt(6.0 / fan_in)


def init_params(layer: Module, scheme: str, rng=None, adjacency=None) -> None:
    """(Re)initialize ``layer`` in place.

    ``identity`` and ``binary-graph`` apply only to :class:`SpatialLinear`;
    ``binary-graph`` copies a V x V 0/1 ``adjacency`` into every head.
    Biases are reset to zero by every scheme.
    """
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    weight = getattr(layer, "weight", None)
    if weight is None:
        raise ConfigError(f"{type(layer).__name__} has no weight to initialize")
    if scheme in ("identity", "binary-graph") and not isinstance(layer, SpatialLinear):
        raise ConfigError(f"{scheme} init applies only to SpatialLinear")
    if isinstance(layer, BatchNorm) and scheme != "zeros":
        raise ConfigError("BatchNorm supports only zeros init for its affine terms")

    w = weight.data
    if scheme == "zeros":
        w[...] = 0
    elif scheme == "identity":
        w[...] = np.eye(layer.joints, dtype=w.dtype)
    elif scheme == "binary-graph":
        adj = np.asarray(adjacency, dtype=w.dtype)
        if adj.shape != (layer.joints, layer.joints):
            raise ConfigError(f"adjacency must be {layer.joints}x{layer.joints}, got {adj.shape}")
        if not np.isin(adj, (0, 1)).all():
            raise ConfigError("adjacency must be a 0/1 matrix")
        w[...] = adj
    else:
        bound = kaiming_bound(layer.fan_in)
        w[...] = _rng(rng).uniform(-bound, bound, size=w.shape)
    bias = getattr(layer, "bias", None)
    if bias is not None:
        bias.data[...] = 0
