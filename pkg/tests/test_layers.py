import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sitmlp.engine import Tensor, grad_check
from sitmlp.exceptions import ConfigError, ContractError, ShapeError
from sitmlp.layers import (
    BatchNorm,
    ChannelLinear,
    Module,
    SpatialLinear,
    TemporalConv,
    conv_output_length,
    init_params,
    kaiming_bound,
    same_padding,
    temporal_maxpool,
)


def contract(layer, x, rng):
    r = Tensor(rng.normal(size=layer(x).shape))
    return lambda: (layer(x) * r).sum()


# -- ChannelLinear ---------------------------------------------------------------


def test_channel_linear_identity(rng):
    layer = ChannelLinear(4, 4)
    layer.weight.data[...] = np.eye(4)
    x = Tensor(rng.normal(size=(2, 3, 5, 4)))
    np.testing.assert_array_equal(layer(x).data, x.data)


def test_channel_linear_hand_sum():
    layer = ChannelLinear(2, 1)
    layer.weight.data[...] = [[1.0], [1.0]]
    assert layer(Tensor([[[[1.0, 2.0]]]])).data.reshape(-1).tolist() == [3.0]


def test_channel_linear_gradient(rng):
    layer = ChannelLinear(3, 4, rng=0)
    layer.bias.data[...] = rng.normal(size=4)
    x = Tensor(rng.normal(size=(2, 3, 2, 3)))
    assert grad_check(contract(layer, x, rng), [x, layer.weight, layer.bias]) < 1e-6


def test_channel_linear_channel_mismatch():
    with pytest.raises(ShapeError):
        ChannelLinear(3, 4)(Tensor(np.ones((1, 1, 1, 5))))


@given(st.integers(0, 2), st.integers(0, 3), st.integers(0, 4))
@settings(max_examples=30, deadline=None)
def test_channel_linear_is_position_local(b, t, v):
    rng = np.random.default_rng(0)
    layer = ChannelLinear(3, 5, rng=1)
    x = rng.normal(size=(3, 4, 5, 3))
    base = layer(Tensor(x)).data
    x2 = x.copy()
    x2[b, t, v] += rng.normal(size=3)
    out = layer(Tensor(x2)).data
    changed = np.any(out != base, axis=-1)
    assert changed[b, t, v]
    changed[b, t, v] = False
    assert not changed.any()


# -- SpatialLinear ---------------------------------------------------------------


def test_spatial_linear_identity(rng):
    layer = SpatialLinear(5, heads=2, init="identity")
    x = Tensor(rng.normal(size=(2, 3, 5, 6)))
    np.testing.assert_array_equal(layer(x).data, x.data)


def test_spatial_linear_swaps_joints(rng):
    layer = SpatialLinear(2, heads=1, init="zeros")
    layer.weight.data[0] = [[0, 1], [1, 0]]
    x = rng.normal(size=(1, 2, 2, 3))
    np.testing.assert_array_equal(layer(Tensor(x)).data, x[:, :, ::-1])


def test_spatial_linear_matches_einsum(rng):
    layer = SpatialLinear(4, heads=2, init="zeros")
    layer.weight.data[...] = rng.normal(size=(2, 4, 4))
    x = rng.normal(size=(2, 3, 4, 6))
    xr = x.reshape(2, 3, 4, 2, 3)
    ref = np.einsum("hvw,btwhc->btvhc", layer.weight.data, xr).reshape(2, 3, 4, 6)
    np.testing.assert_allclose(layer(Tensor(x)).data, ref, rtol=1e-12)


@given(st.integers(0, 3), st.integers(0, 3))
@settings(max_examples=30, deadline=None)
def test_spatial_linear_frame_and_head_locality(t0, head):
    rng = np.random.default_rng(3)
    layer = SpatialLinear(5, heads=4, init="zeros")
    layer.weight.data[...] = rng.normal(size=(4, 5, 5))
    x = rng.normal(size=(2, 4, 5, 8))
    base = layer(Tensor(x)).data
    x2 = x.copy()
    x2[:, t0, :, 2 * head:2 * head + 2] += 1.0
    diff = layer(Tensor(x2)).data != base
    frames = np.any(diff, axis=(0, 2, 3))
    channels = np.any(diff, axis=(0, 1, 2))
    assert frames.tolist() == [t == t0 for t in range(4)]
    assert channels.tolist() == [c // 2 == head for c in range(8)]


def test_spatial_linear_head_divisibility():
    with pytest.raises(ConfigError):
        SpatialLinear(4, heads=3)(Tensor(np.ones((1, 1, 4, 4))))


# -- temporal convolution ---------------------------------------------------------


def test_temporal_conv_k1_identity(rng):
    layer = TemporalConv(1, 1, 1, bias=False)
    layer.weight.data[...] = 1.0
    x = Tensor(rng.normal(size=(1, 6, 2, 1)))
    np.testing.assert_array_equal(layer(x).data, x.data)


def test_temporal_conv_moving_average():
    layer = TemporalConv(1, 1, 3, bias=False)
    layer.weight.data[...] = 1 / 3
    x = Tensor(np.array([0.0, 3.0, 0.0]).reshape(1, 3, 1, 1))
    np.testing.assert_allclose(layer(x).data.reshape(-1), [1, 1, 1], rtol=1e-15)


def test_temporal_conv_stride_two_halves_length():
    layer = TemporalConv(2, 2, 5, dilation=2, stride=2)
    assert layer.output_length(64) == 32
    assert layer(Tensor(np.zeros((1, 64, 1, 2)))).shape == (1, 32, 1, 2)


def test_temporal_conv_matches_direct_sum(rng):
    layer = TemporalConv(3, 2, 3, dilation=2, stride=2, rng=0)
    layer.bias.data[...] = rng.normal(size=2)
    x = rng.normal(size=(1, 9, 2, 3))
    pad = layer.pad
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0), (0, 0)))
    out = layer(Tensor(x)).data
    for t in range(out.shape[1]):
        for o in range(2):
            expected = sum(xp[0, 2 * t + 2 * j, :, :] @ layer.weight.data[o, :, j] for j in range(3))
            np.testing.assert_allclose(out[0, t, :, o], expected + layer.bias.data[o], rtol=1e-12)


@pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 2)])
def test_temporal_conv_gradient(stride, dilation, rng):
    layer = TemporalConv(2, 3, 3, dilation, stride, rng=0)
    layer.bias.data[...] = rng.normal(size=3)
    x = Tensor(rng.normal(size=(2, 7, 2, 2)))
    assert grad_check(contract(layer, x, rng), [x, layer.weight, layer.bias]) < 1e-5


def test_temporal_conv_flops_hand_count():
    assert TemporalConv(4, 4, 5).flops(8, 2) == 2 * 4 * 4 * 5 * 8 * 2 == 2560


def test_even_kernel_rejected():
    with pytest.raises(ConfigError):
        same_padding(4)


@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("d", range(1, 6))
@pytest.mark.parametrize("s", range(1, 6))
def test_length_formula_matches_window_enumeration(k, d, s):
    pad = same_padding(k, d)
    for t in range(1, 21):
        # count window start positions whose whole dilated span fits in the padded sequence
        starts = [i for i in range(0, t + 2 * pad, s) if i + d * (k - 1) < t + 2 * pad]
        assert conv_output_length(t, k, d, s) == len(starts)
        if s == 1:
            assert conv_output_length(t, k, d, s) == t


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 6), st.integers(1, 20))
@settings(max_examples=200, deadline=None)
def test_length_formula_for_any_padding(k, d, s, pad, t):
    span = d * (k - 1) + 1
    starts = [i for i in range(0, t + 2 * pad, s) if i + span <= t + 2 * pad]
    if starts:
        assert conv_output_length(t, k, d, s, pad) == len(starts)


# -- max pool --------------------------------------------------------------------


def test_maxpool_k1_identity(rng):
    x = Tensor(rng.normal(size=(1, 5, 2, 3)))
    np.testing.assert_array_equal(temporal_maxpool(x, 1).data, x.data)


def test_maxpool_hand_max():
    x = Tensor(np.array([1.0, 5.0, 2.0]).reshape(1, 3, 1, 1))
    assert temporal_maxpool(x, 3).data.reshape(-1).tolist() == [5.0, 5.0, 5.0]


def test_maxpool_gradient_goes_to_argmax(rng):
    x = Tensor(rng.permutation(14).astype(np.float64).reshape(1, 7, 1, 2))
    assert grad_check(contract(lambda v: temporal_maxpool(v, 3, 2), x, rng), [x]) < 1e-6


def test_maxpool_negative_inputs_ignore_padding():
    x = Tensor(-np.arange(1.0, 5.0).reshape(1, 4, 1, 1))
    assert temporal_maxpool(x, 3).data.reshape(-1).tolist() == [-1.0, -1.0, -2.0, -3.0]


# -- batch norm ------------------------------------------------------------------


def test_batchnorm_constant_input_gives_zero():
    bn = BatchNorm(3)
    out = bn(Tensor(np.full((4, 2, 3, 3), 7.0))).data
    np.testing.assert_array_equal(out, 0.0)


def test_batchnorm_train_statistics(rng):
    bn = BatchNorm(4)
    x = rng.normal(3.0, 2.5, size=(6, 5, 3, 4))
    out = bn(Tensor(x)).data.reshape(-1, 4)
    assert np.abs(out.mean(axis=0)).max() < 1e-5
    assert np.abs(out.var(axis=0) - 1).max() < 1e-3


def test_batchnorm_eval_is_running_stat_affine(rng):
    bn = BatchNorm(3)
    for _ in range(4):
        bn(Tensor(rng.normal(1.0, 2.0, size=(5, 2, 2, 3))))
    bn.weight.data[...] = rng.normal(size=3)
    bn.bias.data[...] = rng.normal(size=3)
    bn.eval()
    x = rng.normal(size=(2, 3, 2, 3))
    scale = bn.weight.data / np.sqrt(bn.running_var + bn.eps)
    shift = bn.bias.data - bn.running_mean * scale
    np.testing.assert_allclose(bn(Tensor(x)).data, x * scale + shift, rtol=1e-12, atol=1e-14)
    a, b = bn(Tensor(x)).data, bn(Tensor(x)).data
    assert a.tobytes() == b.tobytes()


def test_batchnorm_running_variance_is_unbiased(rng):
    bn = BatchNorm(2, momentum=1.0)
    x = rng.normal(size=(4, 3, 2))
    bn(Tensor(x))
    np.testing.assert_allclose(bn.running_mean, x.reshape(-1, 2).mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(bn.running_var, x.reshape(-1, 2).var(axis=0, ddof=1), rtol=1e-12)


def test_batchnorm_needs_two_samples_in_train_mode():
    with pytest.raises(ContractError):
        BatchNorm(2)(Tensor(np.ones((1, 3, 2))))
    assert BatchNorm(2).eval()(Tensor(np.ones((1, 3, 2)))).shape == (1, 3, 2)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradient(training, rng):
    bn = BatchNorm(3)
    bn.weight.data[...] = rng.normal(size=3)
    bn.bias.data[...] = rng.normal(size=3)
    bn.train(training)
    x = Tensor(rng.normal(size=(3, 4, 2, 3)))
    assert grad_check(contract(bn, x, rng), [x, bn.weight, bn.bias]) < 1e-5


# -- init ------------------------------------------------------------------------


def test_init_identity_spatial():
    layer = SpatialLinear(4, init="zeros")
    init_params(layer, "identity")
    np.testing.assert_array_equal(layer.weight.data[0], np.eye(4))


def test_init_zeros_attention_weight(rng):
    layer = SpatialLinear(4, heads=2, init="identity")
    layer.weight.data[...] = rng.normal(size=layer.weight.shape)
    init_params(layer, "zeros")
    assert not layer.weight.data.any()


def test_kaiming_bound_for_64_inputs():
    assert kaiming_bound(64) == pytest.approx(math.sqrt(6 / 64))
    assert kaiming_bound(64) == pytest.approx(0.3062, abs=1e-4)
    w = ChannelLinear(64, 32, rng=0).weight.data
    assert np.abs(w).max() <= kaiming_bound(64)
    assert np.abs(w).max() > 0.9 * kaiming_bound(64)


def test_binary_graph_init_copies_adjacency():
    adj = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]])
    layer = SpatialLinear(3, heads=2, init="binary-graph", adjacency=adj)
    np.testing.assert_array_equal(layer.weight.data, [adj, adj])
    with pytest.raises(ConfigError):
        SpatialLinear(3, init="binary-graph", adjacency=adj * 2)


def test_identity_init_rejected_for_channel_linear():
    with pytest.raises(ConfigError):
        init_params(ChannelLinear(3, 3), "identity")


def test_unknown_scheme():
    with pytest.raises(ConfigError):
        init_params(ChannelLinear(3, 3), "orthogonal")


# -- module plumbing -------------------------------------------------------------


class _Pair(Module):
    def __init__(self):
        super().__init__()
        self.a = ChannelLinear(2, 3, rng=0)
        self.bn = BatchNorm(3)


def test_state_dict_roundtrip_and_key_checks():
    src, dst = _Pair(), _Pair()
    src.a.weight.data[...] += 1.0
    src.bn.running_mean[...] = 5.0
    dst.load_state_dict(src.state_dict())
    np.testing.assert_array_equal(dst.a.weight.data, src.a.weight.data)
    np.testing.assert_array_equal(dst.bn.running_mean, 5.0)
    assert sorted(src.state_dict()) == sorted(
        ["a.weight", "a.bias", "bn.weight", "bn.bias", "bn.running_mean", "bn.running_var"])
    state = src.state_dict()
    state.pop("a.bias")
    with pytest.raises(ConfigError):
        dst.load_state_dict(state)
    state = src.state_dict()
    state["a.weight"] = np.zeros((3, 3))
    with pytest.raises(ShapeError):
        dst.load_state_dict(state)


def test_train_eval_propagates():
    m = _Pair()
    m.eval()
    assert not m.bn.training
    m.train()
    assert m.bn.training
