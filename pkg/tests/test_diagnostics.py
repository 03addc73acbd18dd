import json

import numpy as np
import pytest

from tembed.blocks import build_block
from tembed.config import DiagnosticsConfig, SolverConfig, block_config
from tembed.diagnostics import (
    DiagnosticsReport,
    Verdict,
    bias_policy_probe,
    diagnose,
    make_probes,
    time_sensitivity,
    variance_ratio_probe,
)
from tembed.errors import ConfigError
from tembed.norm import NormKind, channels_per_unit
from tembed.ode import dopri5_solve

FAST = DiagnosticsConfig(probes=3, t_grid=6)


def expected_verdict(pipeline, norm, padding, positional):
    """The taxonomy predicted from units and padding alone."""
    spec = block_config(channels=8, norm=norm).norm.spec()
    if positional or channels_per_unit(spec, 8) > 1:
        return Verdict.TIME_AWARE
    if padding == "valid":
        return Verdict.TIME_BLIND
    return Verdict.EDGE_ONLY if pipeline == "node_concat_conv" else Verdict.TIME_BLIND


NORMS = [
    {"kind": "batch"},
    {"kind": "instance"},
    {"kind": "layer"},
    {"kind": "group", "groups": 1},
    {"kind": "group", "groups": 2},
    {"kind": "group", "groups": 4},
    {"kind": "group", "groups": 8},
]


@pytest.mark.parametrize("pipeline", ["node_concat_conv", "node_additive", "ddpm"])
@pytest.mark.parametrize("norm", NORMS, ids=lambda n: n.get("groups", n["kind"]))
@pytest.mark.parametrize("padding", ["valid", "same_zero"])
@pytest.mark.parametrize("positional", [None, "linear"])
def test_verdict_taxonomy(pipeline, norm, padding, positional):
    cfg = block_config(pipeline=pipeline, channels=8, height=7, width=7, norm=norm,
                       padding=padding, positional=positional, seed=11)
    report = diagnose(build_block(cfg), FAST)
    assert report.verdict is expected_verdict(pipeline, norm, padding, positional)


def test_sensitivity_exactly_zero_for_constant_block():
    block = build_block(block_config(channels=4, norm={"kind": "group", "groups": 1}))
    state = {k: np.zeros_like(v) for k, v in block.state().items()}
    block.load_state(state)
    stats = time_sensitivity(block, 3, 5, np.random.default_rng(0))
    assert stats.mean == 0.0 and stats.max == 0.0


def test_sensitivity_needs_two_probes_and_grid_points():
    block = build_block(block_config(channels=4))
    with pytest.raises(ConfigError):
        time_sensitivity(block, 1, 5)
    with pytest.raises(ConfigError):
        time_sensitivity(block, 3, 1)


def test_edge_effect_lives_on_the_border():
    cfg = block_config(pipeline="node_concat_conv", channels=8, height=9, width=9,
                       norm={"kind": "instance"}, padding="same_zero")
    report = diagnose(build_block(cfg), FAST)
    assert report.verdict is Verdict.EDGE_ONLY
    assert report.sensitivity > 1e-8


@pytest.mark.parametrize("norm", NORMS[:4], ids=lambda n: n.get("groups", n["kind"]))
@pytest.mark.parametrize("pipeline", ["node_concat_conv", "ddpm"])
def test_sensitivity_and_dt_gradient_agree(norm, pipeline):
    cfg = block_config(pipeline=pipeline, channels=8, height=7, width=7, norm=norm, padding="valid")
    report = diagnose(build_block(cfg), FAST)
    assert (report.sensitivity < 1e-9) == (report.dt_grad_norm < 1e-7)


def test_time_blind_verdict_matches_frozen_field_trajectory():
    cfg = block_config(pipeline="node_additive", channels=4, height=4, width=4, kernel_size=1,
                       norm={"kind": "instance"}, padding="valid", activation="silu", seed=2)
    block = build_block(cfg)
    assert diagnose(block, FAST).verdict is Verdict.TIME_BLIND
    h0 = np.random.default_rng(0).standard_normal((1, 4, 4, 4))
    solver = SolverConfig(rtol=1e-11, atol=1e-11)
    live = dopri5_solve(lambda y, t: block(y.reshape(h0.shape), t).data.ravel(), h0.ravel(), 0.0, 1.0, solver)
    frozen = dopri5_solve(lambda y, t: block(y.reshape(h0.shape), 0.0).data.ravel(), h0.ravel(), 0.0, 1.0, solver)
    assert np.max(np.abs(live.y_final - frozen.y_final)) < 1e-8


def test_report_json_round_trip():
    cfg = block_config(channels=4, norm={"kind": "group", "groups": 1})
    report = diagnose(build_block(cfg), FAST)
    text = json.dumps(report.to_dict(), sort_keys=True)
    back = DiagnosticsReport.from_dict(json.loads(text))
    assert back.to_dict() == report.to_dict()
    assert "artifact-level" in report.to_dict()["thresholds_note"]


def test_csv_rows_cover_every_probe_and_pair():
    block = build_block(block_config(channels=4))
    report = diagnose(block, FAST)
    assert len(report.pair_rows) == FAST.probes * FAST.t_grid * (FAST.t_grid - 1) // 2
    assert max(r[5] for r in report.pair_rows) == pytest.approx(report.sensitivity_max)


def test_variance_ratio_probe_decays_with_operand_scale():
    cfg = block_config(pipeline="node_additive", channels=8, norm={"kind": "group", "groups": 1},
                       padding="valid", height=8, width=8)
    rows = variance_ratio_probe(cfg, [0.0001, 1.0, 10.0, 100.0], np.random.default_rng(0))
    norms = [r["embed_grad_norm"] for r in rows]
    assert all(a > b for a, b in zip(norms, norms[1:]))
    with pytest.raises(ConfigError):
        variance_ratio_probe(cfg, [1.0, 10.0])
    with pytest.raises(ConfigError):
        variance_ratio_probe(cfg, [1.0, 10.0, -1.0])


def test_bias_policy_probe_reports_nonzero_gradients():
    cfg = block_config(pipeline="node_additive", channels=32, height=4, width=4,
                       norm={"kind": "group", "groups": 8}, embedding="sinusoidal_mlp", mlp_hidden=32)
    out = bias_policy_probe(cfg, probes=2)
    assert set(out["embed_grad_norm"]) == {"zero/zero", "zero-conv/default-embed", "default-conv/zero-embed"}
    assert all(v > 0 for v in out["embed_grad_norm"].values())
    assert isinstance(out["ordering_holds"], bool)
    json.loads(json.dumps(out))


def test_probes_are_seeded():
    block = build_block(block_config(channels=4))
    a = make_probes(block, 2, 1, np.random.default_rng(5))
    b = make_probes(block, 2, 1, np.random.default_rng(5))
    assert all(np.array_equal(x, y) for x, y in zip(a.inputs, b.inputs))


def test_norm_kinds_cover_taxonomy():
    assert {n["kind"] for n in NORMS} == {k.value for k in NormKind}
