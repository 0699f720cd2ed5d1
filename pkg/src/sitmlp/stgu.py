"""Spatial topology gating unit.

The block maps ``[B, T, V, C_in]`` to ``[B, T, V, d_model]``::

    shortcut = x                       (projected when C_in != d_model)
    z        = gelu(proj_in(norm(x)))  width 2 * d_model
    f1, f2   = split(z)
    attn     = attn_proj(f2)           joint mixing, zero-initialized
    gated    = f1 * attn               sample-specific branch
    shared   = shared_proj(f1)         sample-generic branch, identity-initialized
    out      = shortcut + proj_out(gated + shared)

Because ``attn_proj`` starts at exactly zero, a fresh block computes
``shortcut + proj_out(shared_proj(f1))`` bit for bit.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from .engine import ops
from .engine.tensor import Tensor
from .exceptions import ConfigError, StateError
from .layers import BatchNorm, ChannelLinear, Module, SpatialLinear


@dataclass(frozen=True)
class StguAblation:
    disable_specific: bool = False
    disable_generic: bool = False
    pool_temporal_attention: bool = False
    pool_channel_attention: bool = False

    def __post_init__(self):
        if self.disable_specific and self.disable_generic:
            raise ConfigError("cannot disable both the gated and the shared branch")

    @classmethod
    def from_mapping(cls, mapping) -> "StguAblation":
        names = {f.name for f in fields(cls)}
        return cls(**{k: bool(v) for k, v in mapping.items() if k in names})


class StguBlock(Module):
    """Gated spatial mixing block.

    Parameters
    ----------
    c_in, d_model : int
        Input and output channel widths. ``d_model`` must be divisible by
        ``heads``.
    joints : int
        Number of skeleton joints V.
    heads : int
        Head count of both joint-mixing projections.
    ablation : StguAblation, optional
        Branch toggles.
    shared_adjacency : array, optional
        0/1 V x V matrix used instead of the identity to initialize the
        shared projection.
    use_norm, activation : bool
        Set both to False to get a purely polynomial block (used to probe the
        interaction order of the branches).
    """

    def __init__(self, c_in: int, d_model: int, joints: int, heads: int = 8,
                 ablation: Optional[StguAblation] = None, shared_adjacency=None,
                 use_norm: bool = True, activation: bool = True, bias: bool = True,
                 dtype=np.float64, rng=None):
        super().__init__()
        if d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.c_in, self.d_model, self.joints, self.heads = c_in, d_model, joints, heads
        self.ablation = ablation or StguAblation()
        self.use_norm, self.activation = use_norm, activation
        self.capture = False
        self.captured_attention: Optional[np.ndarray] = None

        self.norm = BatchNorm(c_in, dtype=dtype)
        self.proj_in = ChannelLinear(c_in, 2 * d_model, bias=bias, dtype=dtype, rng=rng)
        self.attn_proj = SpatialLinear(joints, heads, init="zeros", dtype=dtype)
        if shared_adjacency is None:
            self.shared_proj = SpatialLinear(joints, heads, init="identity", dtype=dtype)
        else:
            self.shared_proj = SpatialLinear(joints, heads, init="binary-graph",
                                             adjacency=shared_adjacency, dtype=dtype)
        self.proj_out = ChannelLinear(d_model, d_model, bias=bias, dtype=dtype, rng=rng)
        self.shortcut_proj = (
            ChannelLinear(c_in, d_model, bias=bias, dtype=dtype, rng=rng) if c_in != d_model else None
        )

    def branches(self, x: Tensor) -> dict:
        """Run the block and return every intermediate feature map by name."""
        ab = self.ablation
        out = {"shortcut": x if self.shortcut_proj is None else self.shortcut_proj(x)}
        u = self.norm(x) if self.use_norm else x
        z = self.proj_in(u)
        if self.activation:
            z = ops.gelu(z)
        f1, f2 = split_channels(z)
        out["f1"], out["f2"] = f1, f2

        mixed = None
        if not ab.disable_specific:
            attn = self.attn_proj(f2)
            if ab.pool_temporal_attention:
                attn = ops.broadcast_to(attn.mean(axes=1, keepdims=True), attn.shape)
            if ab.pool_channel_attention:
                attn = ops.broadcast_to(attn.mean(axes=3, keepdims=True), attn.shape)
            if self.capture:
                self.captured_attention = attn.data.copy()
            out["attention"] = attn
            out["gated"] = mixed = f1 * attn
        if not ab.disable_generic:
            out["shared"] = shared = self.shared_proj(f1)
            mixed = shared if mixed is None else mixed + shared
        out["update"] = self.proj_out(mixed)
        out["output"] = out["shortcut"] + out["update"]
        return out

    def forward(self, x: Tensor) -> Tensor:
        return self.branches(x)["output"]

    def inactive_parameters(self) -> list:
        """Parameters of projections the current ablation never calls."""
        unused = []
        if self.ablation.disable_specific:
            unused += self.attn_proj.parameters()
        if self.ablation.disable_generic:
            unused += self.shared_proj.parameters()
        return unused

    def flops(self, batch: int, frames: int) -> list[tuple[str, int]]:
        n = batch * frames * self.joints
        rows = []
        if self.shortcut_proj is not None:
            rows.append(("shortcut_proj", self.shortcut_proj.flops(n)))
        rows.append(("proj_in", self.proj_in.flops(n)))
        mix = self.attn_proj.flops(batch * frames, self.d_model)
        if not self.ablation.disable_specific:
            rows.append(("attn_proj", mix))
        if not self.ablation.disable_generic:
            rows.append(("shared_proj", mix))
        rows.append(("proj_out", self.proj_out.flops(n)))
        return rows


def split_channels(z: Tensor) -> tuple[Tensor, Tensor]:
    """First half of the trailing axis and second half."""
    return ops.split(z, 2, axis=-1)


def apply_ablation(block: StguBlock, flags) -> StguBlock:
    """Shallow copy of ``block`` sharing its parameters, with new branch toggles."""
    if not isinstance(flags, StguAblation):
        flags = replace(block.ablation, **dict(flags))
    clone = copy.copy(block)
    object.__setattr__(clone, "ablation", flags)
    object.__setattr__(clone, "captured_attention", None)
    return clone


def export_attention(block: StguBlock) -> Tensor:
    """Attention map ``[B, T, V, d_model]`` captured on the last forward."""
    if block.captured_attention is None:
        raise StateError("no attention captured; set block.capture = True and run a forward pass")
    return Tensor(block.captured_attention.copy())
