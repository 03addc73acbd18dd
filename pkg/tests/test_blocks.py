import math

import numpy as np
import pytest

from gradcheck import check
from tembed.blocks import build_block, concat_to_additive
from tembed.config import BiasPolicy, block_config
from tembed.errors import ConfigError
from tembed.tensor import tsum

SMALL = dict(channels=4, height=5, width=5, norm={"kind": "group", "groups": 2})


@pytest.mark.parametrize("pipeline", ["node_concat_conv", "node_additive", "ddpm"])
@pytest.mark.parametrize("padding", ["valid", "same_zero"])
def test_output_shapes(pipeline, padding):
    cfg = block_config(pipeline=pipeline, padding=padding, channels=4, height=8, width=8,
                       norm={"kind": "group", "groups": 2})
    out = build_block(cfg)(np.zeros((2, 4, 8, 8)), 0.5)
    expected = 8 if padding == "same_zero" else 4
    assert out.shape == (2, 4, expected, expected)


def test_parameter_names_and_groups():
    block = build_block(block_config(pipeline="node_concat_conv", positional="linear", **SMALL))
    names = set(block.named_parameters())
    assert {"conv1.weight", "conv1.time_weight", "norm3.gamma", "emb2.pos.p"} <= names
    groups = block.parameter_groups()
    assert "conv2.time_weight" in groups["embed"] and "conv2.weight" in groups["conv"]
    ddpm = build_block(block_config(pipeline="ddpm", embedding="sinusoidal_mlp", **SMALL))
    assert "emb1.mlp.w1" in ddpm.named_parameters()
    assert "norm3.gamma" not in ddpm.named_parameters()
    assert "emb2.mlp.w1" not in ddpm.named_parameters()


def test_build_is_deterministic_in_seed():
    cfg = block_config(seed=7, **SMALL)
    a, b = build_block(cfg).state(), build_block(cfg).state()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    other = build_block(cfg.model_copy(update={"seed": 8})).state()
    assert not np.array_equal(a["conv1.weight"], other["conv1.weight"])


def test_bias_policies_share_every_non_bias_draw():
    zero = BiasPolicy(conv_bias="zero", embed_bias="zero")
    base = block_config(embedding="sinusoidal_mlp", seed=3, **SMALL)
    a = build_block(base).state()
    b = build_block(base.model_copy(update={"bias_policy": zero})).state()
    for name in a:
        if name.endswith("bias") or name.endswith(".b1") or name.endswith(".b2"):
            assert not np.any(b[name])
        else:
            np.testing.assert_array_equal(a[name], b[name])


def test_kaiming_bounds_and_weight_std_override():
    block = build_block(block_config(pipeline="node_additive", **SMALL))
    bound = math.sqrt(6 / (4 * 9))
    assert np.max(np.abs(block.conv_w[0].data)) <= bound
    wide = build_block(block_config(weight_std=2.0, **SMALL))
    w = wide.conv_w[0].data
    assert np.max(np.abs(w)) <= 2.0 * math.sqrt(3) and np.max(np.abs(w)) > bound


def test_positional_maps_follow_insertion_geometry():
    cfg = block_config(padding="valid", positional="linear", channels=4, height=9, width=9,
                       norm={"kind": "group", "groups": 2})
    block = build_block(cfg)
    assert block.insertions[0].pos_p.shape == (7, 7)
    assert block.insertions[1].pos_p.shape == (5, 5)


@pytest.mark.parametrize("seed", range(5))
def test_concat_block_equals_its_additive_form_with_valid_padding(seed):
    cfg = block_config(pipeline="node_concat_conv", padding="valid", channels=4, height=8, width=8,
                       norm={"kind": "group", "groups": 2}, seed=seed)
    block = build_block(cfg)
    twin = concat_to_additive(block)
    x = np.random.default_rng(seed).standard_normal((2, 4, 8, 8))
    for t in (0.0, 0.37, 1.0):
        assert np.max(np.abs(block(x, t).data - twin(x, t).data)) < 1e-12


def test_concat_to_additive_rejects_other_pipelines():
    with pytest.raises(ConfigError):
        concat_to_additive(build_block(block_config(**SMALL)))


@pytest.mark.parametrize(
    "overrides",
    [
        dict(pipeline="node_concat_conv", padding="same_zero"),
        dict(pipeline="node_additive", embedding="sinusoidal_mlp", positional="sinusoidal_mlp",
             activation="silu", sinusoidal_dim=4, mlp_hidden=6),
        dict(pipeline="ddpm", positional="linear", activation="softplus"),
    ],
    ids=["concat", "additive-mlp", "ddpm-positional"],
)
def test_full_block_gradients(overrides):
    cfg = block_config(channels=2, height=4, width=4, norm={"kind": "group", "groups": 1},
                       kernel_size=3, **{"padding": "same_zero", **overrides})
    block = build_block(cfg)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 2, 4, 4))
    r = rng.standard_normal(block(x, 0.3).shape)
    params = list(block.named_parameters().values())
    assert check(lambda: tsum(block(x, np.array([0.3, 0.8])) * r), params) < 1e-5


def test_state_round_trip_and_shape_check():
    a = build_block(block_config(seed=1, **SMALL))
    b = build_block(block_config(seed=2, **SMALL))
    b.load_state(a.state())
    x = np.random.default_rng(0).standard_normal((1, 4, 5, 5))
    np.testing.assert_array_equal(a(x, 0.4).data, b(x, 0.4).data)
    bad = a.state()
    bad["conv1.weight"] = np.zeros((1, 1, 1, 1))
    with pytest.raises(ConfigError):
        b.load_state(bad)


def test_operand_scale_touches_only_operand_kernels():
    block = build_block(block_config(pipeline="node_concat_conv", **SMALL))
    scaled = block.with_operand_scale(10.0)
    np.testing.assert_allclose(scaled.conv_w[1].data, 10 * block.conv_w[1].data)
    np.testing.assert_array_equal(scaled.time_w[0].data, block.time_w[0].data)
    np.testing.assert_array_equal(scaled.conv_b[0].data, block.conv_b[0].data)


def test_forward_validates_inputs():
    block = build_block(block_config(**SMALL))
    with pytest.raises(ConfigError):
        block(np.zeros((1, 3, 5, 5)), 0.0)
    with pytest.raises(ConfigError):
        block(np.zeros((2, 4, 5, 5)), [0.1, 0.2, 0.3])


@pytest.mark.parametrize(
    "bad",
    [
        dict(norm={"kind": "group", "groups": 3}),
        dict(pipeline="node_concat_conv", embedding="sinusoidal_mlp"),
        dict(padding="valid", height=4, width=4),
        dict(sinusoidal_dim=5),
        dict(kernel_size=2),
        dict(unknown_key=1),
        dict(norm={"kind": "instance", "groups": 2}),
    ],
)
def test_invalid_block_configs(bad):
    with pytest.raises(ConfigError):
        block_config(**{"channels": 4, **bad})
