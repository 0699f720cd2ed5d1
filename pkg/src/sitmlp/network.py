"""Full network: embedding, five spatial/temporal basic blocks, pooled head,
plus configuration I/O and parameter/FLOP accounting."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .data import SkeletonGraph, default_graph
from .engine import ops
from .engine.tensor import Tensor
from .exceptions import ConfigError, ShapeError
from .layers import BatchNorm, ChannelLinear, Module, ModuleList, Parameter, TemporalConv, temporal_maxpool
from .stgu import StguAblation, StguBlock

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

ABLATION_KEYS = ("disable_specific", "disable_generic", "pool_temporal_attention", "pool_channel_attention")


@dataclass
class ModelConfig:
    joints: int = 25
    frames: int = 64
    persons: int = 2
    coord_dim: int = 3
    base_channels: int = 48
    channels: Optional[list] = None
    heads: int = 8
    num_classes: int = 60
    strides: list = field(default_factory=lambda: [1, 2, 1, 2, 1])
    mstc_kernels: list = field(default_factory=lambda: [5, 5])
    mstc_dilations: list = field(default_factory=lambda: [1, 2])
    mstc_pool: int = 3
    input_norm: bool = True
    disable_specific: bool = False
    disable_generic: bool = False
    pool_temporal_attention: bool = False
    pool_channel_attention: bool = False
    prior_init: bool = False
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.strides = list(self.strides)
        self.mstc_kernels = list(self.mstc_kernels)
        self.mstc_dilations = list(self.mstc_dilations)
        if self.channels is not None:
            self.channels = list(self.channels)
        self.validate()

    @property
    def widths(self) -> list:
        if self.channels is not None:
            return list(self.channels)
        c = self.base_channels
        return [c, 2 * c, 2 * c, 4 * c, 4 * c]

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def ablation(self) -> StguAblation:
        return StguAblation(**{k: getattr(self, k) for k in ABLATION_KEYS})

    @property
    def branches(self) -> int:
        return len(self.mstc_kernels) + 1

    def validate(self) -> None:
        for key in ("joints", "frames", "persons", "coord_dim", "heads", "num_classes", "base_channels"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if len(self.strides) != 5 or any(s not in (1, 2) for s in self.strides):
            raise ConfigError(f"strides must be five values in {{1, 2}}, got {self.strides}")
        total = math.prod(self.strides)
        if self.frames % total:
            raise ConfigError(f"frames={self.frames} is not divisible by the total stride {total}")
        if len(self.widths) != 5:
            raise ConfigError("channels must list five widths")
        if len(self.mstc_kernels) != len(self.mstc_dilations):
            raise ConfigError("mstc_kernels and mstc_dilations differ in length")
        if any(k % 2 == 0 for k in self.mstc_kernels) or self.mstc_pool % 2 == 0:
            raise ConfigError("temporal kernels must be odd")
        for w in self.widths:
            if w % self.heads:
                raise ConfigError(f"width {w} is not divisible by heads={self.heads}")
            if w % self.branches:
                raise ConfigError(f"width {w} is not divisible by {self.branches} temporal branches")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        self.ablation  # raises when both branches are disabled

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, mapping: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**mapping)


def load_config(path) -> tuple[ModelConfig, dict]:
    """Read a TOML-style file. Top-level keys configure the model; an
    optional ``[train]`` table is returned separately."""
    try:
        raw = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    train = raw.pop("train", {})
    return ModelConfig.from_dict(raw), train


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def dump_config(cfg: ModelConfig, train: Optional[dict] = None) -> str:
    lines = [f"{k} = {_toml_value(v)}" for k, v in cfg.to_dict().items()]
    if train:
        lines += ["", "[train]"] + [f"{k} = {_toml_value(v)}" for k, v in train.items()]
    return "\n".join(lines) + "\n"


class EmbeddingBlock(Module):
    """Per-joint coordinate projection plus a learnable pose embedding shared by all frames."""

    def __init__(self, coord_dim: int, channels: int, joints: int, input_norm: bool = True,
                 dtype=np.float64, rng=None):
        super().__init__()
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.coord_dim, self.channels, self.joints = coord_dim, channels, joints
        self.norm = BatchNorm(coord_dim, dtype=dtype) if input_norm else None
        self.proj = ChannelLinear(coord_dim, channels, dtype=dtype, rng=rng)
        self.pose_embedding = Parameter(rng.normal(0.0, 0.02, (joints, channels)).astype(dtype), decay=False)

    def forward(self, s: Tensor) -> Tensor:
        if s.ndim != 5:
            raise ShapeError(f"expected [B, M, T, V, D] input, got {s.shape}")
        b, m, t, v, d = s.shape
        if d != self.coord_dim:
            raise ShapeError(f"expected {self.coord_dim} coordinates, got {d}")
        if v != self.joints:
            raise ShapeError(f"expected {self.joints} joints, got {v}")
        x = s.reshape(b * m, t, v, d)
        if self.norm is not None:
            x = self.norm(x)
        return self.proj(x) + self.pose_embedding

    def flops(self, batch: int, frames: int) -> list:
        return [("proj", self.proj.flops(batch * frames * self.joints))]


class MsTcBlock(Module):
    """Parallel temporal branches concatenated on channels.

    Every branch starts with a 1x1 channel reduction to ``c_out / branches``
    followed by ReLU; the dilated branches then apply a strided temporal
    convolution, the last branch a strided temporal max-pool.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 1, kernels=(5, 5), dilations=(1, 2),
                 pool: int = 3, dtype=np.float64, rng=None):
        super().__init__()
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        branches = len(kernels) + 1
        if c_out % branches:
            raise ConfigError(f"c_out={c_out} is not divisible by {branches} branches")
        width = c_out // branches
        self.c_in, self.c_out, self.stride, self.pool, self.width = c_in, c_out, stride, pool, width
        # the pooling branch gets no reduction bias: a constant shift passes through
        # ReLU (where active) and max-pooling unchanged, and the batch norm removes it
        self.reduce = ModuleList(
            ChannelLinear(c_in, width, bias=i < len(kernels), dtype=dtype, rng=rng) for i in range(branches)
        )
        self.convs = ModuleList(
            # no bias: the batch norm over the concatenated branches would cancel it
            TemporalConv(width, width, k, d, stride, bias=False, dtype=dtype, rng=rng)
            for k, d in zip(kernels, dilations)
        )
        self.norm = BatchNorm(c_out, dtype=dtype)

    def branch_outputs(self, x: Tensor) -> list:
        outs = []
        for i, reduce in enumerate(self.reduce):
            h = ops.relu(reduce(x))
            if i < len(self.convs):
                outs.append(self.convs[i](h))
            else:
                outs.append(temporal_maxpool(h, self.pool, self.stride))
        return outs

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(ops.concat(self.branch_outputs(x), axis=-1))

    def output_length(self, frames: int) -> int:
        return (frames + 2 * ((self.pool - 1) // 2) - self.pool) // self.stride + 1

    def flops(self, batch: int, frames: int, joints: int) -> list:
        t_out = self.output_length(frames)
        rows = [(f"reduce.{i}", r.flops(batch * frames * joints)) for i, r in enumerate(self.reduce)]
        rows += [(f"convs.{i}", batch * c.flops(c.output_length(frames), joints)) for i, c in enumerate(self.convs)]
        return rows


class BasicBlock(Module):
    """``relu(mstc(stgu(x)) + residual(x))`` with a strided 1x1 residual
    projection when the shape changes."""

    def __init__(self, c_in: int, c_out: int, stride: int, joints: int, heads: int,
                 ablation: Optional[StguAblation] = None, shared_adjacency=None,
                 kernels=(5, 5), dilations=(1, 2), pool: int = 3, dtype=np.float64, rng=None):
        super().__init__()
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.stgu = StguBlock(c_in, c_out, joints, heads, ablation, shared_adjacency, dtype=dtype, rng=rng)
        self.mstc = MsTcBlock(c_out, c_out, stride, kernels, dilations, pool, dtype=dtype, rng=rng)
        self.residual = (
            ChannelLinear(c_in, c_out, dtype=dtype, rng=rng) if (c_in != c_out or stride != 1) else None
        )

    def shortcut(self, x: Tensor) -> Tensor:
        if self.residual is None:
            return x
        if self.stride != 1:
            x = x[:, :: self.stride]
        return self.residual(x)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.mstc(self.stgu(x)) + self.shortcut(x))

    def flops(self, batch: int, frames: int, joints: int) -> list:
        rows = [(f"stgu.{n}", f) for n, f in self.stgu.flops(batch, frames)]
        rows += [(f"mstc.{n}", f) for n, f in self.mstc.flops(batch, frames, joints)]
        if self.residual is not None:
            t_out = -(-frames // self.stride)
            rows.append(("residual", self.residual.flops(batch * t_out * joints)))
        return rows


class SitMlpModel(Module):
    """Skeleton action classifier: ``[B, M, T, V, D]`` sequences to ``[B, K]`` logits."""

    def __init__(self, config: Optional[ModelConfig] = None, graph: Optional[SkeletonGraph] = None, **overrides):
        super().__init__()
        if config is None:
            config = ModelConfig(**overrides)
        elif overrides:
            config = ModelConfig.from_dict({**config.to_dict(), **overrides})
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        dtype = cfg.dtype
        adjacency = None
        if cfg.prior_init:
            graph = graph or default_graph(cfg.joints)
            if graph.num_joints != cfg.joints:
                raise ConfigError(f"graph has {graph.num_joints} joints, config has {cfg.joints}")
            adjacency = graph.outward_adjacency()

        widths = cfg.widths
        self.embedding = EmbeddingBlock(cfg.coord_dim, widths[0], cfg.joints, cfg.input_norm, dtype, rng)
        c_in = widths[0]
        blocks = []
        for c_out, stride in zip(widths, cfg.strides):
            blocks.append(BasicBlock(
                c_in, c_out, stride, cfg.joints, cfg.heads, cfg.ablation, adjacency,
                cfg.mstc_kernels, cfg.mstc_dilations, cfg.mstc_pool, dtype, rng,
            ))
            c_in = c_out
        self.blocks = ModuleList(blocks)
        self.classifier = ChannelLinear(widths[-1], cfg.num_classes, dtype=dtype, rng=rng)
        self.hidden_lengths: list = []

    @property
    def stgu_blocks(self) -> list:
        return [b.stgu for b in self.blocks]

    def features(self, batch: Tensor) -> Tensor:
        """Pooled ``[B, C]`` features before the classifier."""
        b, m = batch.shape[:2]
        if batch.ndim == 5 and batch.shape[2] % math.prod(self.config.strides):
            raise ConfigError(f"{batch.shape[2]} frames are not divisible by the total stride")
        x = self.embedding(batch)
        lengths = []
        for block in self.blocks:
            x = block(x)
            lengths.append(x.shape[1])
        self.hidden_lengths = lengths
        pooled = x.mean(axes=(1, 2))
        return pooled.reshape(b, m, pooled.shape[-1]).mean(axes=1)

    def forward(self, batch: Tensor) -> Tensor:
        return self.classifier(self.features(batch))

    def trainable_parameters(self) -> list:
        """Parameters reached by the forward pass; ablated projections are left out."""
        inactive = {id(p) for stgu in self.stgu_blocks for p in stgu.inactive_parameters()}
        return [p for p in self.parameters() if id(p) not in inactive]

    def set_capture(self, flag: bool = True) -> None:
        for stgu in self.stgu_blocks:
            stgu.capture = flag


def count_params(model: Module) -> int:
    return sum(p.size for p in model.parameters())


def param_table(model: Module, depth: int = 2) -> list:
    """``(module path, parameter count)`` rows grouped ``depth`` levels deep."""
    rows: dict = {}
    for name, p in model.named_parameters():
        key = ".".join(name.split(".")[:depth])
        rows[key] = rows.get(key, 0) + p.size
    return list(rows.items())


def flop_table(model: SitMlpModel, input_shape) -> list:
    """Analytic per-layer FLOPs (2 x multiply-accumulates of every projection,
    convolution and classifier matmul) for an input of ``input_shape``."""
    b, m, t, v, _ = input_shape
    n = b * m
    rows = [(f"embedding.{k}", f) for k, f in model.embedding.flops(n, t)]
    for i, block in enumerate(model.blocks):
        rows += [(f"blocks.{i}.{k}", f) for k, f in block.flops(n, t, v)]
        t = block.mstc.output_length(t)
    rows.append(("classifier", model.classifier.flops(b)))
    return rows


def count_flops(model: SitMlpModel, input_shape) -> int:
    return sum(f for _, f in flop_table(model, input_shape))


def measure_flops(model: SitMlpModel, input_shape) -> int:
    """Matmul FLOPs observed by the engine during one eval forward on zeros."""
    was_training = model.training
    model.eval()
    try:
        x = Tensor(np.zeros(input_shape, dtype=model.config.dtype))
        with ops.count_matmul_flops() as counter:
            model(x)
    finally:
        model.train(was_training)
    return counter.total
