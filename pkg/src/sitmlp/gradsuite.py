"""Finite-difference gradient checks for every differentiable op and layer.

Each case builds a small float64 problem and returns ``(f, inputs)`` where
``f()`` is a scalar. Layer outputs are contracted with a fixed random tensor
so that every output coordinate contributes to the loss with a distinct
weight. Zero-initialized weights are re-drawn at random first, otherwise
whole branches would carry exactly-zero gradients and check nothing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .engine import ops
from .engine.gradcheck import grad_check
from .engine.tensor import Tensor
from .exceptions import ConfigError
from .layers import BatchNorm, ChannelLinear, Module, SpatialLinear, TemporalConv, temporal_maxpool
from .network import BasicBlock, EmbeddingBlock, MsTcBlock, SitMlpModel
from .stgu import StguAblation, StguBlock

TOLERANCE = 1e-4
STEP = 1e-5
MICRO_MODEL = dict(joints=4, frames=8, persons=2, base_channels=6, heads=2, num_classes=2,
                   precision="float64")


@dataclass
class CaseResult:
    name: str
    error: float
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _t(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, shape))


def _positive(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(0.5, 2.0, shape))


def _randomize(module: Module, rng, scale: float = 0.5) -> None:
    for p in module.parameters():
        p.data[...] = p.data + rng.uniform(-scale, scale, p.shape)


def _contracted(fn: Callable[[], Tensor], shape, rng) -> Callable[[], Tensor]:
    r = Tensor(rng.normal(size=shape))
    return lambda: (fn() * r).sum()


def _layer_case(layer: Module, x: Tensor, rng, randomize: bool = True):
    if randomize:
        _randomize(layer, rng)
    layer.train()
    out_shape = layer(x).shape
    return _contracted(lambda: layer(x), out_shape, rng), [x] + layer.parameters()


# -- engine ops ----------------------------------------------------------------


def _unary(op):
    def build(rng):
        x = _t(rng, 3, 4)
        return _contracted(lambda: op(x), x.shape, rng), [x]
    return build


def _binary(op, positive_rhs: bool = False):
    def build(rng):
        a = _t(rng, 2, 3, 4)
        b = _positive(rng, 3, 1) if positive_rhs else _t(rng, 3, 1)
        return _contracted(lambda: op(a, b), (2, 3, 4), rng), [a, b]
    return build


def _matmul(rng):
    a, w = _t(rng, 2, 3, 5), _t(rng, 5, 4)
    b = _t(rng, 2, 5, 3)
    return lambda: (ops.matmul(a, w).sum() + (ops.matmul(a, b) ** 2).mean()), [a, w, b]


def _reductions(rng):
    x = _t(rng, 3, 4, 5)
    r = Tensor(rng.normal(size=(3, 5)))
    return lambda: (x.sum(axes=1) * r).sum() + x.mean(axes=(0, 2)).sum() * 2.0 + (x.max(axes=1) * r).sum(), [x]


def _shape_ops(rng):
    x = _t(rng, 2, 3, 4)
    r = Tensor(rng.normal(size=(4, 3, 2)))

    def f():
        y = x.transpose(2, 1, 0) * r
        a, b = ops.split(x, 2, axis=-1)
        joined = ops.concat([b, a, x[:, :, 1:2]], axis=-1)
        picked = x[np.array([1, 0, 1]), :, 2]
        return y.sum() + (joined ** 2).sum() + (picked * picked).sum() + ops.broadcast_to(x[:, :1], x.shape).sum()
    return f, [x]


def _unfold(rng):
    x = _t(rng, 2, 7, 3, 2)
    out_shape = ops.unfold_time(x, 3, 2, 2, 2).shape
    return _contracted(lambda: ops.unfold_time(x, 3, 2, 2, 2), out_shape, rng), [x]


def _cross_entropy(rng):
    logits = _t(rng, 5, 4, low=-3, high=3)
    labels = np.array([0, 3, 1, 1, 2])
    return lambda: ops.cross_entropy(logits, labels), [logits]


# -- layers --------------------------------------------------------------------


def _channel_linear(rng):
    return _layer_case(ChannelLinear(3, 5, rng=rng), _t(rng, 2, 3, 4, 3), rng)


def _spatial_linear(heads: int, bias: bool):
    def build(rng):
        layer = SpatialLinear(4, heads, bias=bias, init="zeros")
        return _layer_case(layer, _t(rng, 2, 3, 4, 4), rng)
    return build


def _temporal_conv(stride: int, dilation: int):
    def build(rng):
        return _layer_case(TemporalConv(3, 4, 3, dilation, stride, rng=rng), _t(rng, 2, 7, 3, 3), rng)
    return build


def _maxpool(rng):
    x = _t(rng, 2, 7, 3, 2)
    out_shape = temporal_maxpool(x, 3, 2).shape
    return _contracted(lambda: temporal_maxpool(x, 3, 2), out_shape, rng), [x]


def _batchnorm(training: bool):
    def build(rng):
        layer = BatchNorm(3)
        _randomize(layer, rng)
        layer.running_mean[...] = rng.normal(size=3)
        layer.running_var[...] = rng.uniform(0.5, 2.0, 3)
        layer.train(training)
        x = _t(rng, 3, 4, 2, 3)
        return _contracted(lambda: layer(x), x.shape, rng), [x] + layer.parameters()
    return build


def _stgu(c_in: int, d_model: int, ablation: Optional[StguAblation] = None, **kw):
    def build(rng):
        block = StguBlock(c_in, d_model, 4, heads=2, ablation=ablation, rng=rng, **kw)
        return _layer_case(block, _t(rng, 2, 3, 4, c_in), rng)
    return build


def _embedding(rng):
    return _layer_case(EmbeddingBlock(3, 6, 4, rng=rng), _t(rng, 2, 2, 3, 4, 3), rng)


def _mstc(stride: int):
    def build(rng):
        return _layer_case(MsTcBlock(6, 6, stride, rng=rng), _t(rng, 2, 8, 3, 6), rng)
    return build


def _basic_block(c_in: int, c_out: int, stride: int):
    def build(rng):
        block = BasicBlock(c_in, c_out, stride, 4, 2, rng=rng)
        return _layer_case(block, _t(rng, 2, 8, 4, c_in), rng)
    return build


def _micro_model(rng):
    model = SitMlpModel(**MICRO_MODEL)
    for stgu in model.stgu_blocks:
        stgu.attn_proj.weight.data[...] = rng.uniform(-0.5, 0.5, stgu.attn_proj.weight.shape)
    model.train()
    x = _t(rng, 3, 2, 8, 4, 3)
    labels = np.array([0, 1, 1])
    return lambda: ops.cross_entropy(model(x), labels), [x] + model.parameters()


CASES: dict = {
    "ops.gelu": _unary(ops.gelu),
    "ops.relu": _unary(ops.relu),
    "ops.exp": _unary(ops.exp),
    "ops.log": lambda rng: (lambda x: (_contracted(lambda: ops.log(x), x.shape, rng), [x]))(_positive(rng, 3, 4)),
    "ops.pow": lambda rng: (lambda x: (_contracted(lambda: x ** -0.5, x.shape, rng), [x]))(_positive(rng, 3, 4)),
    "ops.softmax": _unary(lambda x: ops.softmax(x, axis=0)),
    "ops.log_softmax": _unary(lambda x: ops.log_softmax(x, axis=1)),
    "ops.add": _binary(ops.add),
    "ops.sub": _binary(ops.sub),
    "ops.mul": _binary(ops.mul),
    "ops.div": _binary(ops.div, positive_rhs=True),
    "ops.matmul": _matmul,
    "ops.reductions": _reductions,
    "ops.shape": _shape_ops,
    "ops.unfold_time": _unfold,
    "ops.cross_entropy": _cross_entropy,
    "layers.ChannelLinear": _channel_linear,
    "layers.SpatialLinear[h=1]": _spatial_linear(1, False),
    "layers.SpatialLinear[h=2,bias]": _spatial_linear(2, True),
    "layers.TemporalConv[s=1,d=1]": _temporal_conv(1, 1),
    "layers.TemporalConv[s=2,d=2]": _temporal_conv(2, 2),
    "layers.temporal_maxpool": _maxpool,
    "layers.BatchNorm[train]": _batchnorm(True),
    "layers.BatchNorm[eval]": _batchnorm(False),
    "stgu.StguBlock": _stgu(4, 4),
    "stgu.StguBlock[projected]": _stgu(2, 4),
    "stgu.StguBlock[no-specific]": _stgu(4, 4, StguAblation(disable_specific=True)),
    "stgu.StguBlock[no-generic]": _stgu(4, 4, StguAblation(disable_generic=True)),
    "stgu.StguBlock[pooled]": _stgu(4, 4, StguAblation(pool_temporal_attention=True,
                                                         pool_channel_attention=True)),
    "network.EmbeddingBlock": _embedding,
    "network.MsTcBlock[s=1]": _mstc(1),
    "network.MsTcBlock[s=2]": _mstc(2),
    "network.BasicBlock": _basic_block(6, 6, 1),
    "network.BasicBlock[s=2,widen]": _basic_block(6, 12, 2),
    "network.SitMlpModel[micro]": _micro_model,
}

# large parameter sets are probed on a random subset of coordinates per tensor
MAX_COORDS = {"network.SitMlpModel[micro]": 12}


def run_suite(names: Optional[Sequence[str]] = None, seed: int = 0, h: float = STEP,
              max_coords: int = 64) -> list:
    names = list(names or CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ConfigError(f"unknown gradcheck cases {unknown}")
    results = []
    for name in names:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        start = time.perf_counter()
        f, inputs = CASES[name](rng)
        err = grad_check(f, inputs, h=h, max_coords=MAX_COORDS.get(name, max_coords), seed=seed)
        results.append(CaseResult(name, err, time.perf_counter() - start))
    return results
