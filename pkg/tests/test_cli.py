import json
from importlib import resources
from pathlib import Path

import jsonschema
import pytest
from click.testing import CliRunner

from tembed.cli import METRICS_HEADER, SWEEP_HEADER, main
from tembed.config import RunConfig
from tembed.errors import ConfigError, DivergenceError, NumericalError, StiffnessError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = {
    "block": {
        "pipeline": "node_additive",
        "channels": 4,
        "height": 4,
        "width": 4,
        "kernel_size": 1,
        "padding": "valid",
        "activation": "silu",
        "embedding": "sinusoidal_mlp",
        "norm": {"kind": "group", "groups": 1},
    },
    "task": {"name": "field_regression", "n_eval": 8, "quadrature_nodes": 8},
    "train": {"steps": 6, "batch_size": 4, "log_every": 2, "lr": 0.01},
    "diagnostics": {"probes": 2, "t_grid": 4},
    "seed": 5,
}


def schema(name):
    return json.loads(resources.files("tembed").joinpath("schemas", name).read_text())


def run(*args, env=None):
    return CliRunner().invoke(main, [str(a) for a in args], env=env or {}, catch_exceptions=False)


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_diagnose_bundled_configs(tmp_path):
    blind = run("diagnose", CONFIGS / "instance_valid.json", "--out", tmp_path / "a")
    assert blind.exit_code == 0 and blind.output.startswith("verdict=TimeBlind sensitivity=")
    aware = run("diagnose", CONFIGS / "gn1_positional.json", "--out", tmp_path / "b")
    assert aware.exit_code == 0 and aware.output.startswith("verdict=TimeAware")
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    jsonschema.validate(report, schema("diagnostics_report.schema.json"))
    resolved = json.loads((tmp_path / "a" / "config.json").read_text())
    jsonschema.validate(resolved, schema("run_config.schema.json"))
    assert resolved["block"]["seed"] == 0
    header = (tmp_path / "a" / "report.csv").read_text().splitlines()[0]
    assert header == "probe,i,j,t_i,t_j,max_abs_diff"


def test_missing_config_names_the_path(tmp_path):
    missing = tmp_path / "nope.json"
    result = run("diagnose", missing)
    assert result.exit_code == 2 and str(missing) in result.output


def test_unknown_key_is_rejected_with_its_location(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"block": {"chanels": 4}}))
    result = run("diagnose", bad)
    assert result.exit_code == 2 and "block.chanels" in result.output


def test_threshold_flags_override_config(tiny, tmp_path):
    result = run("diagnose", tiny, "--out", tmp_path, "--sensitivity-threshold", "1e3", "--grad-threshold", "1e9")
    assert result.output.startswith("verdict=TimeBlind")


def test_seed_environment_override(tiny, tmp_path):
    run("diagnose", tiny, "--out", tmp_path, env={"TEMBED_SEED": "42"})
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 42
    result = run("diagnose", tiny, "--out", tmp_path, env={"TEMBED_SEED": "x"})
    assert result.exit_code == 2


def test_train_outputs_and_determinism(tiny, tmp_path):
    first = run("train", tiny, "--out", tmp_path / "r1")
    assert first.exit_code == 0, first.output
    run("train", tiny, "--out", tmp_path / "r1")  # re-running into an existing directory is fine
    run("train", tiny, "--out", tmp_path / "r2")
    for name in ("metrics.csv", "summary.json", "config.json"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    lines = (tmp_path / "r1" / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert len(lines) == 1 + 4 and lines[1].endswith(",")  # time column empty without record_timing
    summary = json.loads((tmp_path / "r1" / "summary.json").read_text())
    jsonschema.validate(summary, schema("train_summary.schema.json"))


def test_sweep_aggregates_over_seeds(tiny, tmp_path):
    result = run("sweep", tiny, "--param", "groups", "--values", "1,4", "--seeds", "2", "--out", tmp_path)
    assert result.exit_code == 0, result.output
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert rows[0] == ",".join(SWEEP_HEADER)
    assert [r.split(",")[1] for r in rows[1:]] == ["1", "4"]
    assert (tmp_path / "runs" / "groups=4" / "seed=6" / "metrics.csv").exists()


def test_sweep_is_independent_of_worker_count(tiny, tmp_path):
    args = ("sweep", tiny, "--param", "activation", "--values", "relu,elu", "--seeds", "1")
    run(*args, "--out", tmp_path / "serial")
    run(*args, "--jobs", "2", "--out", tmp_path / "pool")
    assert (tmp_path / "serial" / "sweep.csv").read_bytes() == (tmp_path / "pool" / "sweep.csv").read_bytes()


def test_singleton_sweep_degenerates_to_train(tiny, tmp_path):
    result = run("sweep", tiny, "--param", "bias_policy", "--values", "zero/default", "--seeds", "1",
                 "--out", tmp_path)
    assert result.exit_code == 0, result.output
    assert (tmp_path / "metrics.csv").exists() and (tmp_path / "summary.json").exists()


def test_weight_scale_sweep_is_a_probe(tiny, tmp_path):
    result = run("sweep", tiny, "--param", "weight_scale", "--values", "1,10", "--seeds", "1", "--out", tmp_path)
    assert result.exit_code == 0, result.output
    assert "embed_grad_norm" in (tmp_path / "sweep.csv").read_text()


@pytest.mark.parametrize("args", [("--param", "depth", "--values", "1"), ("--param", "groups", "--values", "3"),
                                  ("--param", "bias_policy", "--values", "odd"), ("--param", "groups", "--values", ",")])
def test_sweep_rejects_bad_parameters(tiny, tmp_path, args):
    assert run("sweep", tiny, *args, "--out", tmp_path).exit_code == 2


def test_solve_exp(tmp_path):
    result = run("solve", "--testcase", "exp", "--rtol", "1e-8", "--atol", "1e-8", "--out", tmp_path)
    assert result.exit_code == 0
    assert result.output.startswith("y_final=2.71828183")
    payload = json.loads((tmp_path / "solve.json").read_text())
    jsonschema.validate(payload, schema("solve_result.schema.json"))
    assert payload["max_abs_error"] < 1e-7


def test_solve_oscillator_and_block(tmp_path, tiny):
    osc = run("solve", "--testcase", "oscillator", "--rtol", "1e-9", "--atol", "1e-9", "--out", tmp_path)
    assert json.loads((tmp_path / "solve.json").read_text())["max_abs_error"] < 1e-7
    assert osc.exit_code == 0
    blk = run("solve", "--testcase", f"block:{tiny}", "--out", tmp_path)
    assert blk.exit_code == 0 and "nfe=" in blk.output


def test_solve_validation_and_stiffness(tmp_path):
    assert run("solve", "--testcase", "exp", "--rtol", "0").exit_code == 2
    assert run("solve", "--testcase", "nothing").exit_code == 2
    stiff = run("solve", "--testcase", "stiff", "--max-steps", "50", "--out", tmp_path)
    assert stiff.exit_code == 5
    payload = json.loads((tmp_path / "solve.json").read_text())
    jsonschema.validate(payload, schema("solve_result.schema.json"))
    assert payload["status"] == "stiff" and payload["partial"]["nfe"] == 1 + 6 * 50


def test_exit_code_contract():
    assert ConfigError.exit_code == 2
    assert NumericalError.exit_code == 3
    assert DivergenceError(7).exit_code == 4 and DivergenceError(7).step == 7
    assert StiffnessError("x").exit_code == 5


def test_shipped_run_config_schema_is_current():
    assert schema("run_config.schema.json") == json.loads(json.dumps(RunConfig.model_json_schema()))
