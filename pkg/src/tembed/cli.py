"""``tembed`` command line: diagnose, train, sweep, solve.

Exit codes: 0 ok, 2 invalid config, 3 numerical failure, 4 divergence,
5 solver stiffness.
"""

from __future__ import annotations

import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from .blocks import build_block
from .config import BiasInit, BiasPolicy, NormConfig, RunConfig, SolverConfig, load_run_config
from .diagnostics import diagnose, variance_ratio_probe
from .errors import ConfigError, StiffnessError, TembedError
from .norm import NormKind
from .ode import SolveResult, dopri5_solve
from .tasks import run_task

METRICS_HEADER = ["step", "loss", "loss_over_floor", "embed_grad_norm", "time_elapsed_s"]
REPORT_CSV_HEADER = ["probe", "i", "j", "t_i", "t_j", "max_abs_diff"]
SWEEP_HEADER = ["param", "value", "metric", "mean_metric", "std_metric", "n_seeds", "mean_nfe"]
SWEEP_PARAMS = ("groups", "activation", "weight_scale", "bias_policy")

BIAS_POLICY_VALUES = {
    "zero/zero": BiasPolicy(conv_bias=BiasInit.ZERO, embed_bias=BiasInit.ZERO),
    "zero/default": BiasPolicy(conv_bias=BiasInit.ZERO, embed_bias=BiasInit.DEFAULT),
    "default/zero": BiasPolicy(conv_bias=BiasInit.DEFAULT, embed_bias=BiasInit.ZERO),
    "default/default": BiasPolicy(conv_bias=BiasInit.DEFAULT, embed_bias=BiasInit.DEFAULT),
}


# ---------------------------------------------------------------- output helpers


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        values = [row[k] for k in header] if isinstance(row, dict) else row
        writer.writerow([_fmt(v) for v in values])
    path.write_text(buf.getvalue())


def _out_dir(out: str | None, cfg: RunConfig | None = None) -> Path:
    path = Path(out or (cfg.out_dir if cfg and cfg.out_dir else "."))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fail(err: TembedError) -> None:
    click.echo(f"error: {err}", err=True)
    sys.exit(err.exit_code)


# ---------------------------------------------------------------- commands


@click.group()
def main():
    """Timestep-embedding lab: diagnostics, training tasks and ODE solves."""


@main.command("diagnose")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
@click.option("--sensitivity-threshold", type=float, help="Override the sensitivity certificate.")
@click.option("--grad-threshold", type=float, help="Override the embedding-gradient certificate.")
def cmd_diagnose(config, out, sensitivity_threshold, grad_threshold):
    """Certify whether a configured block depends on t."""
    try:
        cfg = load_run_config(config)
        diag = cfg.diagnostics
        overrides = {k: v for k, v in (("sensitivity_threshold", sensitivity_threshold),
                                       ("grad_threshold", grad_threshold)) if v is not None}
        if overrides:
            diag = type(diag).model_validate({**diag.model_dump(), **overrides})
        block = build_block(cfg.block)
        report = diagnose(block, diag, np.random.default_rng([cfg.seed, 3]))
        path = _out_dir(out, cfg)
        write_json(path / "config.json", cfg.model_dump(mode="json"))
        write_json(path / "report.json", report.to_dict())
        write_csv(path / "report.csv", REPORT_CSV_HEADER, report.pair_rows)
    except TembedError as err:
        _fail(err)
    click.echo(report.verdict_line)


def _train_into(cfg: RunConfig, path: Path) -> dict:
    _, result = run_task(cfg)
    write_json(path / "config.json", cfg.model_dump(mode="json"))
    write_csv(path / "metrics.csv", METRICS_HEADER, result.rows)
    summary = result.summary()
    write_json(path / "summary.json", summary)
    return summary


@main.command("train")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
def cmd_train(config, out):
    """Train the configured block on its task and write metrics.csv and summary.json."""
    try:
        cfg = load_run_config(config)
        summary = _train_into(cfg, _out_dir(out, cfg))
    except TembedError as err:
        _fail(err)
    ratio = summary["loss_over_floor"]
    click.echo(f"final_mse={summary['final_mse']:.6e} loss_over_floor={_fmt(ratio) or 'n/a'} nfe={summary['nfe']}")


def apply_sweep_value(cfg: RunConfig, param: str, value: str) -> RunConfig:
    """Copy of ``cfg`` with one sweep coordinate set; raises ConfigError on bad values."""
    block = cfg.block.model_dump()
    try:
        if param == "groups":
            g = int(value)
            block["norm"] = NormConfig(kind=NormKind.GROUP, groups=g).model_dump()
        elif param == "activation":
            block["activation"] = value
        elif param == "bias_policy":
            if value not in BIAS_POLICY_VALUES:
                raise ConfigError(f"bias_policy must be one of {sorted(BIAS_POLICY_VALUES)}, got {value!r}")
            block["bias_policy"] = BIAS_POLICY_VALUES[value].model_dump()
        elif param == "weight_scale":
            if not float(value) > 0:
                raise ConfigError(f"weight_scale must be positive, got {value}")
        else:
            raise ConfigError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    except ValueError as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"invalid value {value!r} for {param}: {err}") from None
    from .config import parse_run_config

    data = cfg.model_dump(mode="json")
    block["seed"] = None
    data["block"] = json.loads(json.dumps(block, default=lambda e: e.value))
    return parse_run_config(data, env={})


def _sweep_point(args) -> dict:
    cfg_json, param, value, seed, run_dir = args
    cfg = RunConfig.model_validate_json(cfg_json)
    from .config import parse_run_config

    data = cfg.model_dump(mode="json")
    data["seed"] = seed
    data["block"]["seed"] = None
    cfg = apply_sweep_value(parse_run_config(data, env={}), param, value)
    path = Path(run_dir)
    path.mkdir(parents=True, exist_ok=True)
    if param == "weight_scale":
        block = build_block(cfg.block)
        (row,) = variance_ratio_probe(block, [float(value)] * 3, np.random.default_rng([seed, 3]))[:1]
        summary = {"metric": "embed_grad_norm", "value": row["embed_grad_norm"], "nfe": None}
        write_json(path / "config.json", cfg.model_dump(mode="json"))
        write_json(path / "summary.json", {"embed_grad_norm": row["embed_grad_norm"], "scale": float(value)})
        return summary
    s = _train_into(cfg, path)
    return {"metric": "final_mse", "value": s["final_mse"], "nfe": s["nfe"]}


def _aggregate(param: str, value: str, results: list[dict]) -> dict:
    vals = np.array([r["value"] for r in results])
    nfes = [r["nfe"] for r in results if r["nfe"] is not None]
    return {
        "param": param,
        "value": value,
        "metric": results[0]["metric"],
        "mean_metric": float(vals.mean()),
        "std_metric": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
        "n_seeds": len(vals),
        "mean_nfe": float(np.mean(nfes)) if nfes else None,
    }


def _split_values(values: str) -> list[str]:
    out = [v.strip() for v in values.split(",") if v.strip()]
    if not out:
        raise ConfigError("--values needs at least one entry")
    return out


@main.command("sweep")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--param", required=True, help=f"One of: {', '.join(SWEEP_PARAMS)}.")
@click.option("--values", required=True, help="Comma-separated values.")
@click.option("--seeds", default=3, show_default=True, type=click.IntRange(min=1), help="Seeds per value.")
@click.option("--jobs", default=1, show_default=True, type=click.IntRange(min=1), help="Worker processes.")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
def cmd_sweep(config, param, values, seeds, jobs, out):
    """One run per value and seed; aggregated sweep.csv with mean/std per value."""
    try:
        if param not in SWEEP_PARAMS:
            raise ConfigError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
        cfg = load_run_config(config)
        vals = _split_values(values)
        for v in vals:
            apply_sweep_value(cfg, param, v)  # validate before spending compute
        path = _out_dir(out, cfg)
        write_json(path / "config.json", cfg.model_dump(mode="json"))
        cfg_json = cfg.model_dump_json()
        jobs_list = [
            (cfg_json, param, v, cfg.seed + k, str(path / "runs" / f"{param}={v.replace('/', '-')}" / f"seed={cfg.seed + k}"))
            for v in vals
            for k in range(seeds)
        ]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_sweep_point, jobs_list))
        else:
            results = [_sweep_point(j) for j in jobs_list]
        rows = [_aggregate(param, v, results[i * seeds:(i + 1) * seeds]) for i, v in enumerate(vals)]
        write_csv(path / "sweep.csv", SWEEP_HEADER, rows)
        if len(vals) == 1 and param != "weight_scale":
            single = apply_sweep_value(cfg, param, vals[0])
            _train_into(single, path)
    except TembedError as err:
        _fail(err)
    for r in rows:
        nfe = "" if r["mean_nfe"] is None else f" nfe={r['mean_nfe']:.1f}"
        click.echo(f"{param}={r['value']} {r['metric']}={r['mean_metric']:.6e}±{r['std_metric']:.2e}{nfe}")


# ---------------------------------------------------------------- solve


def _testcase(name: str, seed: int):
    """Vector field, initial state, interval and (if known) the exact final state."""
    if name == "exp":
        return (lambda y, t: y), np.array([1.0]), 1.0, np.array([math.e])
    if name == "oscillator":
        return (lambda y, t: np.array([y[1], -y[0]])), np.array([1.0, 0.0]), 2 * math.pi, np.array([1.0, 0.0])
    if name == "stiff":
        lam = 1e6
        return (lambda y, t: -lam * (y - np.cos(t))), np.array([0.0]), 1.0, None
    if name.startswith("block:"):
        cfg = load_run_config(name.split(":", 1)[1])
        block = build_block(cfg.block)
        b = cfg.block
        if not b.preserves_shape:
            raise ConfigError("solve needs a shape-preserving block (same_zero padding or kernel_size 1)")
        shape = (1, b.channels, b.height, b.width)
        h0 = np.random.default_rng([seed, 4]).standard_normal(shape)
        return (lambda y, t: block.forward(y.reshape(shape), t).data.ravel()), h0.ravel(), 1.0, None
    raise ConfigError(f"unknown testcase {name!r}; choose exp, oscillator, stiff or block:<config.json>")


@main.command("solve")
@click.option("--testcase", required=True, help="exp, oscillator, stiff or block:<config.json>.")
@click.option("--rtol", default=1e-3, show_default=True, type=float)
@click.option("--atol", default=1e-3, show_default=True, type=float)
@click.option("--max-steps", default=10000, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int, help="Initial state seed for block testcases.")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
def cmd_solve(testcase, rtol, atol, max_steps, seed, out):
    """Integrate a test problem with dopri5 and report NFE."""
    from pydantic import ValidationError

    try:
        try:
            solver = SolverConfig(rtol=rtol, atol=atol, max_steps=max_steps)
        except ValidationError as err:
            raise ConfigError("; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in err.errors())) from None
        f, y0, t1, exact = _testcase(testcase, seed)
        path = _out_dir(out)
        try:
            res = dopri5_solve(f, y0, 0.0, t1, solver)
        except StiffnessError as err:
            payload = {"testcase": testcase, "status": "stiff", "message": str(err)}
            if err.partial is not None:
                payload["partial"] = err.partial.to_dict()
            write_json(path / "solve.json", payload)
            raise
    except TembedError as err:
        _fail(err)
    payload = {"testcase": testcase, "status": "ok", "rtol": rtol, "atol": atol, "result": res.to_dict()}
    if exact is not None:
        payload["max_abs_error"] = float(np.max(np.abs(res.y_final - exact)))
    write_json(path / "solve.json", payload)
    click.echo(_solve_line(res))


def _solve_line(res: SolveResult) -> str:
    y = res.y_final
    shown = " ".join(f"{v:.10g}" for v in y[:4]) + (" ..." if y.size > 4 else "")
    return f"y_final={shown} nfe={res.nfe} accepted={res.steps_accepted} rejected={res.steps_rejected}"


if __name__ == "__main__":  # pragma: no cover
    main()
