import numpy as np
import pytest

from conftest import TINY
from sitmlp.engine import Tensor, grad_check, ops
from sitmlp.exceptions import ConfigError, ShapeError
from sitmlp.network import (
    BasicBlock,
    EmbeddingBlock,
    ModelConfig,
    MsTcBlock,
    SitMlpModel,
    count_flops,
    count_params,
    dump_config,
    flop_table,
    load_config,
    measure_flops,
    param_table,
)


def hand_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count, written out layer by layer."""
    v, h, d = cfg.joints, cfg.heads, cfg.coord_dim
    widths = cfg.widths
    total = 2 * d + d * widths[0] + widths[0] + v * widths[0]
    c_in = widths[0]
    for c_out, s in zip(widths, cfg.strides):
        w = c_out // 3
        stgu = 2 * c_in + (c_in * 2 * c_out + 2 * c_out) + 2 * h * v * v + (c_out * c_out + c_out)
        if c_in != c_out:
            stgu += c_in * c_out + c_out
        mstc = 3 * c_out * w + 2 * w + 2 * 5 * w * w + 2 * c_out
        residual = c_in * c_out + c_out if (c_in != c_out or s != 1) else 0
        total += stgu + mstc + residual
        c_in = c_out
    return total + widths[-1] * cfg.num_classes + cfg.num_classes


def test_logits_shape_ntu_layout(rng):
    model = SitMlpModel()
    x = Tensor(rng.normal(size=(2, 2, 64, 25, 3)).astype(np.float32))
    assert model(x).shape == (2, 60)


def test_base_width_64_fails_fast():
    # 64 is not divisible by the three temporal branches
    with pytest.raises(ConfigError):
        ModelConfig(base_channels=64)


@pytest.mark.parametrize("bad", [
    dict(frames=30), dict(strides=[1, 2, 1, 2]), dict(strides=[1, 3, 1, 1, 1]), dict(heads=5),
    dict(mstc_kernels=[4, 5]), dict(precision="float16"), dict(joints=0),
    dict(disable_specific=True, disable_generic=True), dict(channels=[6, 12, 12, 24]),
])
def test_illegal_configs_rejected(bad):
    with pytest.raises(ConfigError):
        SitMlpModel(**{**TINY, **bad})


def test_unknown_config_key_rejected():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"jionts": 25})


@pytest.mark.parametrize("overrides", [{}, dict(heads=3, base_channels=6), dict(strides=[1, 1, 1, 1, 1])])
def test_logits_shape_for_legal_configs(overrides, rng):
    model = SitMlpModel(**{**TINY, **overrides})
    x = Tensor(rng.normal(size=(3, 1, 8, 4, 3)))
    assert model(x).shape == (3, 3)


def test_eval_forward_is_pure_and_batch_independent(tiny_model, rng):
    tiny_model.eval()
    x = rng.normal(size=(5, 1, 8, 4, 3))
    a = tiny_model(Tensor(x)).data
    assert a.tobytes() == tiny_model(Tensor(x)).data.tobytes()
    perm = rng.permutation(5)
    np.testing.assert_allclose(tiny_model(Tensor(x[perm])).data, a[perm], rtol=1e-12, atol=1e-14)
    single = tiny_model(Tensor(x[2:3])).data
    np.testing.assert_allclose(single, a[2:3], rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("training", [True, False])
def test_zero_gates_equal_gate_free_reference(training, rng):
    model = SitMlpModel(**TINY)
    reference = SitMlpModel(**TINY, disable_specific=True)
    reference.load_state_dict(model.state_dict())
    model.train(training)
    reference.train(training)
    x = Tensor(rng.normal(size=(3, 1, 8, 4, 3)))
    assert model(x).data.tobytes() == reference(x).data.tobytes()


def test_hidden_lengths_halve_at_blocks_two_and_four(rng):
    model = SitMlpModel(**{**TINY, "frames": 16})
    model(Tensor(rng.normal(size=(2, 1, 16, 4, 3))))
    assert model.hidden_lengths == [16, 8, 8, 4, 4]


def test_frames_not_divisible_at_forward(tiny_model):
    with pytest.raises(ConfigError):
        tiny_model(Tensor(np.zeros((2, 1, 6, 4, 3))))


def test_persons_are_averaged(rng):
    model = SitMlpModel(**{**TINY, "persons": 2}).eval()
    x = rng.normal(size=(2, 2, 8, 4, 3))
    swapped = x[:, ::-1].copy()
    np.testing.assert_allclose(model(Tensor(x)).data, model(Tensor(swapped)).data, rtol=1e-12)


# -- embedding -------------------------------------------------------------------


def test_embedding_identity_configuration(rng):
    emb = EmbeddingBlock(3, 3, 4, input_norm=False)
    emb.proj.weight.data[...] = np.eye(3)
    emb.proj.bias.data[...] = 0.0
    emb.pose_embedding.data[...] = 0.0
    s = rng.normal(size=(2, 1, 5, 4, 3))
    np.testing.assert_array_equal(emb(Tensor(s)).data, s.reshape(2, 5, 4, 3))


def test_embedding_shares_pose_embedding_across_frames(rng):
    emb = EmbeddingBlock(3, 6, 4, input_norm=False, rng=0)
    frame = rng.normal(size=(4, 3))
    s = np.stack([frame, rng.normal(size=(4, 3)), frame])[None, None]
    out = emb(Tensor(s)).data
    assert out[0, 0].tobytes() == out[0, 2].tobytes()


def test_embedding_folds_persons(rng):
    emb = EmbeddingBlock(3, 6, 4, input_norm=False, rng=0)
    s = rng.normal(size=(2, 3, 5, 4, 3))
    out = emb(Tensor(s)).data
    np.testing.assert_array_equal(out[1 * 3 + 2], emb(Tensor(s[1:2, 2:3])).data[0])


def test_embedding_gradient(rng):
    emb = EmbeddingBlock(3, 5, 4, rng=0)
    s = Tensor(rng.normal(size=(2, 2, 3, 4, 3)))
    r = Tensor(rng.normal(size=(4, 3, 4, 5)))
    assert grad_check(lambda: (emb(s) * r).sum(), [emb.proj.weight, emb.pose_embedding]) < 1e-5


def test_embedding_shape_errors():
    emb = EmbeddingBlock(3, 6, 4)
    with pytest.raises(ShapeError):
        emb(Tensor(np.zeros((1, 1, 2, 4, 2))))
    with pytest.raises(ShapeError):
        emb(Tensor(np.zeros((1, 1, 2, 5, 3))))
    with pytest.raises(ShapeError):
        emb(Tensor(np.zeros((1, 2, 4, 3))))


# -- MS-TC -----------------------------------------------------------------------


@pytest.mark.parametrize("stride,expected", [(1, 8), (2, 4)])
def test_mstc_lengths(stride, expected, rng):
    block = MsTcBlock(6, 6, stride, rng=0)
    assert block(Tensor(rng.normal(size=(2, 8, 3, 6)))).shape == (2, expected, 3, 6)
    assert block.output_length(8) == expected


def test_mstc_width_must_split_into_branches():
    with pytest.raises(ConfigError):
        MsTcBlock(4, 8)


def test_mstc_zero_input_matches_hand_composition(rng):
    block = MsTcBlock(6, 6, stride=2, rng=0).eval()
    for r in block.reduce:
        if r.bias is not None:
            r.bias.data[...] = rng.normal(size=r.bias.shape)
    block.norm.running_mean[...] = rng.normal(size=6)
    block.norm.running_var[...] = rng.uniform(0.5, 2.0, size=6)
    block.norm.weight.data[...] = rng.normal(size=6)
    block.norm.bias.data[...] = rng.normal(size=6)
    t, v = 8, 3
    out = block(Tensor(np.zeros((1, t, v, 6)))).data

    branches = []
    for conv, reduce in zip(block.convs, block.reduce):
        h = np.maximum(reduce.bias.data, 0.0)  # same value at every position
        k, d, pad = conv.kernel, conv.dilation, conv.pad
        w = conv.weight.data  # [out, in, k]
        res = np.zeros((4, 2))
        for i, t0 in enumerate(range(0, t, 2)):
            for j in range(k):
                src = t0 + j * d - pad
                if 0 <= src < t:
                    res[i] += w[:, :, j] @ h
        branches.append(np.broadcast_to(res[:, None, :], (4, v, 2)))
    branches.append(np.zeros((4, v, 2)))  # bias-free reduction of zeros, relu, max-pool
    cat = np.concatenate(branches, axis=-1)
    bn = block.norm
    ref = (cat - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) * bn.weight.data + bn.bias.data
    np.testing.assert_allclose(out[0], ref, rtol=1e-12, atol=1e-13)


def test_mstc_gradient(rng):
    block = MsTcBlock(3, 6, stride=2, rng=0)
    x = Tensor(rng.normal(size=(2, 6, 2, 3)))
    r = Tensor(rng.normal(size=(2, 3, 2, 6)))
    params = [x] + [p for _, p in block.named_parameters()]
    assert grad_check(lambda: (block(x) * r).sum(), params) < 1e-4


def test_basic_block_residual_is_strided(rng):
    block = BasicBlock(6, 12, 2, joints=3, heads=2, rng=0)
    x = rng.normal(size=(2, 8, 3, 6))
    expected = block.residual(Tensor(x[:, ::2])).data
    assert block.shortcut(Tensor(x)).data.tobytes() == expected.tobytes()
    assert BasicBlock(6, 6, 1, 3, 2, rng=0).residual is None


# -- accounting ------------------------------------------------------------------


def test_param_count_matches_enumeration_and_closed_form():
    model = SitMlpModel()
    by_names = sum(v.size for k, v in model.state_dict().items() if "running_" not in k)
    assert count_params(model) == by_names == hand_param_count(model.config) == 550_866
    assert sum(n for _, n in param_table(model, 1)) == count_params(model)


@pytest.mark.parametrize("overrides", [{}, dict(disable_generic=True), dict(pool_temporal_attention=True)])
def test_flop_table_matches_instrumentation(overrides):
    model = SitMlpModel(**{**TINY, **overrides})
    shape = (2, 1, 8, 4, 3)
    assert count_flops(model, shape) == measure_flops(model, shape)
    assert sum(f for _, f in flop_table(model, shape)) == count_flops(model, shape)


def test_default_flops_match_instrumentation():
    model = SitMlpModel()
    shape = (1, 2, 64, 25, 3)
    assert count_flops(model, shape) == measure_flops(model, shape) == 1_397_885_440


def test_flops_scale_linearly_with_batch():
    model = SitMlpModel(**TINY)
    assert count_flops(model, (4, 1, 8, 4, 3)) == 4 * count_flops(model, (1, 1, 8, 4, 3))


# -- config files ----------------------------------------------------------------


def test_config_toml_roundtrip(tmp_path):
    cfg = ModelConfig(**{**TINY, "pool_channel_attention": True, "strides": [1, 2, 1, 1, 1]})
    path = tmp_path / "model.toml"
    path.write_text(dump_config(cfg, {"epochs": 3, "base_lr": 0.05}))
    back, train = load_config(path)
    assert back == cfg
    assert train == {"epochs": 3, "base_lr": 0.05}


def test_config_parse_error(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("joints = = 3\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_prior_init_uses_graph_adjacency():
    model = SitMlpModel(**{**TINY, "prior_init": True})
    w = model.stgu_blocks[0].shared_proj.weight.data
    assert set(np.unique(w)) <= {0.0, 1.0}
    assert not np.array_equal(w[0], np.eye(4))


def test_same_seed_same_weights():
    a, b = SitMlpModel(**TINY), SitMlpModel(**TINY)
    assert all(a.state_dict()[k].tobytes() == v.tobytes() for k, v in b.state_dict().items())
    c = SitMlpModel(**{**TINY, "seed": 1})
    assert c.state_dict()["classifier.weight"].tobytes() != a.state_dict()["classifier.weight"].tobytes()
