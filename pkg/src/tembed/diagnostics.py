"""Certificates of time-awareness for configured blocks.

A block is *TimeBlind* when its output does not move over the probe t-grid and
the gradient of a fixed probe loss w.r.t. every timestep parameter vanishes.
*EdgeOnly* marks blocks whose only surviving timestep signal comes from the
zero-padded border of a ConcatConv time plane.  Thresholds are artifact-level
definitions (see ``DiagnosticsConfig``), not quantities taken from elsewhere.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import Block, build_block
from .config import BiasInit, BiasPolicy, BlockConfig, DiagnosticsConfig, Pipeline
from .errors import ConfigError
from .norm import NormKind, channels_per_unit
from .tensor import Padding, Tensor, backward, conv2d, tsum

__all__ = [
    "DiagnosticsReport",
    "SensitivityStats",
    "Verdict",
    "bias_policy_probe",
    "diagnose",
    "dt_grad_norm",
    "embed_grad_norm",
    "make_probes",
    "time_sensitivity",
    "variance_ratio_probe",
]


class Verdict(str, enum.Enum):
    TIME_BLIND = "TimeBlind"
    EDGE_ONLY = "EdgeOnly"
    TIME_AWARE = "TimeAware"


@dataclass
class Probes:
    inputs: list[np.ndarray]
    weights: list[np.ndarray]  # fixed random readout for the probe loss


def make_probes(block: Block, count: int, batch: int, rng: np.random.Generator) -> Probes:
    cfg = block.cfg
    shape = (batch, cfg.channels, cfg.height, cfg.width)
    inputs = [rng.standard_normal(shape) for _ in range(count)]
    out_shape = block.forward(inputs[0], 0.0).shape
    weights = [rng.standard_normal(out_shape) for _ in range(count)]
    return Probes(inputs, weights)


def _t_grid(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def _loss_times(grid: np.ndarray) -> np.ndarray:
    idx = np.unique(np.linspace(0, len(grid) - 1, min(4, len(grid))).round().astype(int))
    return grid[idx]


@dataclass
class SensitivityStats:
    t_grid: list[float]
    per_probe: list[float]
    mean: float
    max: float
    spatial_map: list[list[float]]
    border_mean: float
    interior_mean: float
    pair_rows: list[tuple[int, int, int, float, float, float]] = field(repr=False, default_factory=list)


def _border_mask(h: int, w: int, width: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    if width > 0:
        mask[:width, :] = mask[-width:, :] = True
        mask[:, :width] = mask[:, -width:] = True
    return mask


def time_sensitivity(
    block: Block,
    probes: int | Probes = 8,
    t_grid: int = 32,
    rng: np.random.Generator | None = None,
    probe_batch: int = 2,
) -> SensitivityStats:
    """Max pairwise inf-norm output difference over a uniform t-grid on [0, 1]."""
    if t_grid < 2:
        raise ConfigError("t_grid must be at least 2")
    if isinstance(probes, int):
        if probes < 2:
            raise ConfigError("need at least two probes")
        probes = make_probes(block, probes, probe_batch, rng or np.random.default_rng(0))
    grid = _t_grid(t_grid)
    per_probe, maps, rows = [], [], []
    pairs = list(itertools.combinations(range(t_grid), 2))
    for p, x in enumerate(probes.inputs):
        outs = np.stack([block.forward(x, t).data for t in grid])  # (T, N, C, H, W)
        spread = outs.max(axis=0) - outs.min(axis=0)
        per_probe.append(float(spread.max()))
        maps.append(spread.max(axis=(0, 1)))
        flat = outs.reshape(t_grid, -1)
        for i, j in pairs:
            rows.append((p, i, j, float(grid[i]), float(grid[j]), float(np.abs(flat[i] - flat[j]).max())))
    smap = np.mean(maps, axis=0)
    ring = max(1, block.cfg.kernel_size // 2)
    mask = _border_mask(*smap.shape, ring)
    interior = smap[~mask]
    return SensitivityStats(
        t_grid=grid.tolist(),
        per_probe=per_probe,
        mean=float(np.mean(per_probe)),
        max=float(np.max(per_probe)),
        spatial_map=smap.tolist(),
        border_mean=float(smap[mask].mean()),
        interior_mean=float(interior.mean()) if interior.size else 0.0,
        pair_rows=rows,
    )


def _probe_loss(block: Block, probes: Probes, times) -> Tensor:
    total = None
    for x, r in zip(probes.inputs, probes.weights):
        for t in times:
            term = tsum(block.forward(x, float(t)) * r)
            total = term if total is None else total + term
    return total


def embed_grad_norm(block: Block, probes: Probes, times=(0.0, 1 / 3, 2 / 3, 1.0)) -> float:
    """L2 norm of the probe-loss gradient over all timestep parameters."""
    params = block.embedding_parameters()
    if not params:
        return 0.0
    grads = backward(_probe_loss(block, probes, times), params)
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def dt_grad_norm(block: Block, probes: Probes, times, step: float = 1e-4) -> float:
    """Central-difference inf-norm of d forward / d t, maximized over probes and times."""
    worst = 0.0
    for x in probes.inputs:
        for t in times:
            tc = float(np.clip(t, step, 1.0 - step))
            d = (block.forward(x, tc + step).data - block.forward(x, tc - step).data) / (2 * step)
            worst = max(worst, float(np.abs(d).max()))
    return worst


def _time_maps(block: Block, t: float) -> list[np.ndarray]:
    """Additive timestep contribution (C, H_i, W_i) at each insertion point."""
    cfg = block.cfg
    shrink = 0 if cfg.padding is Padding.SAME_ZERO else cfg.kernel_size - 1
    maps = []
    for i, ins in enumerate(block.insertions):
        h, w = cfg.height - i * shrink, cfg.width - i * shrink
        ho, wo = h - shrink, w - shrink
        m = np.zeros((cfg.channels, ho, wo))
        if cfg.pipeline is Pipeline.NODE_CONCAT_CONV:
            plane = Tensor(np.full((1, 1, h, w), t))
            m += conv2d(plane, block.time_w[i], None, cfg.padding).data[0]
        off = ins.channel_offset(t, block.sin_spec)
        if off is not None:
            m += off.data[:, None, None]
        pos = ins.positional(t, (ho, wo), block.sin_spec)
        if pos is not None:
            m += pos.data[None]
        maps.append(m)
    return maps


def _edge_only(block: Block, grid: np.ndarray, threshold: float) -> bool:
    """True when the timestep signal that survives per-unit centering lives only on the border."""
    cfg = block.cfg
    if cfg.padding is not Padding.SAME_ZERO:
        return False
    spec = cfg.norm.spec()
    cpu = channels_per_unit(spec, cfg.channels)
    if cfg.norm.kind is NormKind.BATCH or cfg.norm.kind is NormKind.INSTANCE:
        units = [[c] for c in range(cfg.channels)]
    else:
        units = [list(range(u, u + cpu)) for u in range(0, cfg.channels, cpu)]
    ring = cfg.kernel_size // 2
    base = _time_maps(block, float(grid[0]))
    interior_res, border_res = 0.0, 0.0
    for t in grid[1:]:
        for m0, m1 in zip(base, _time_maps(block, float(t))):
            d = m1 - m0
            mask = _border_mask(d.shape[1], d.shape[2], ring)
            if mask.all():
                return False
            for unit in units:
                du = d[unit]
                centered = du - du[:, ~mask].mean()
                interior_res = max(interior_res, float(np.abs(centered[:, ~mask]).max()))
                border_res = max(border_res, float(np.abs(centered[:, mask]).max()) if mask.any() else 0.0)
    return interior_res < threshold <= border_res


@dataclass
class DiagnosticsReport:
    config: dict
    sensitivity: float
    sensitivity_max: float
    dt_grad_norm: float
    embed_grad_norm: float
    channels_per_unit: int
    verdict: Verdict
    per_probe_sensitivity: list[float]
    spatial_map: list[list[float]]
    border_mean: float
    interior_mean: float
    thresholds: dict
    t_grid: list[float]
    pair_rows: list[tuple] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("pair_rows")
        d["verdict"] = self.verdict.value
        d["thresholds_note"] = "artifact-level certificate thresholds, not physical constants"
        return d

    @property
    def verdict_line(self) -> str:
        return (
            f"verdict={self.verdict.value} sensitivity={self.sensitivity:.6e} "
            f"embed_grad={self.embed_grad_norm:.6e}"
        )

    @staticmethod
    def from_dict(d: dict) -> DiagnosticsReport:
        d = dict(d)
        d.pop("thresholds_note", None)
        d["verdict"] = Verdict(d["verdict"])
        return DiagnosticsReport(**d)


def diagnose(block: Block, cfg: DiagnosticsConfig | None = None, rng: np.random.Generator | None = None) -> DiagnosticsReport:
    cfg = cfg or DiagnosticsConfig()
    rng = rng or np.random.default_rng(0)
    probes = make_probes(block, cfg.probes, cfg.probe_batch, rng)
    sens = time_sensitivity(block, probes, cfg.t_grid)
    grid = np.asarray(sens.t_grid)
    times = _loss_times(grid)
    egrad = embed_grad_norm(block, probes, times)
    dtg = dt_grad_norm(block, probes, times, cfg.dt_step)
    if sens.mean < cfg.sensitivity_threshold and egrad < cfg.grad_threshold:
        verdict = Verdict.TIME_BLIND
    elif _edge_only(block, grid, cfg.sensitivity_threshold):
        verdict = Verdict.EDGE_ONLY
    else:
        verdict = Verdict.TIME_AWARE
    return DiagnosticsReport(
        config=block.cfg.model_dump(mode="json"),
        sensitivity=sens.mean,
        sensitivity_max=sens.max,
        dt_grad_norm=dtg,
        embed_grad_norm=egrad,
        channels_per_unit=channels_per_unit(block.cfg.norm.spec(), block.cfg.channels),
        verdict=verdict,
        per_probe_sensitivity=sens.per_probe,
        spatial_map=sens.spatial_map,
        border_mean=sens.border_mean,
        interior_mean=sens.interior_mean,
        thresholds={
            "sensitivity": cfg.sensitivity_threshold,
            "embed_grad": cfg.grad_threshold,
        },
        t_grid=sens.t_grid,
        pair_rows=sens.pair_rows,
    )


def variance_ratio_probe(
    template: BlockConfig | Block,
    scales=(1.0, 10.0, 100.0),
    rng: np.random.Generator | None = None,
    probes: int = 8,
    probe_batch: int = 2,
) -> list[dict]:
    """Embedding-gradient norm of a fixed probe loss as the operand kernels grow by ``scale``."""
    scales = [float(s) for s in scales]
    if len(scales) < 3 or any(s <= 0 for s in scales):
        raise ConfigError("variance_ratio_probe needs at least three positive scales")
    base = template if isinstance(template, Block) else build_block(template)
    probe_set = make_probes(base, probes, probe_batch, rng or np.random.default_rng(0))
    return [
        {"scale": s, "embed_grad_norm": embed_grad_norm(base.with_operand_scale(s), probe_set)} for s in scales
    ]


BIAS_POLICIES = {
    "zero/zero": BiasPolicy(conv_bias=BiasInit.ZERO, embed_bias=BiasInit.ZERO),
    "zero-conv/default-embed": BiasPolicy(conv_bias=BiasInit.ZERO, embed_bias=BiasInit.DEFAULT),
    "default-conv/zero-embed": BiasPolicy(conv_bias=BiasInit.DEFAULT, embed_bias=BiasInit.ZERO),
}


def bias_policy_probe(
    cfg: BlockConfig,
    rng_seed: int = 0,
    probes: int = 4,
    probe_batch: int = 2,
) -> dict:
    """Initial embedding-gradient norm per bias policy.

    The three blocks share every weight draw (same seed); only bias draws
    differ.  The conventional ordering is reported, never enforced.
    """
    out = {}
    for label, policy in BIAS_POLICIES.items():
        block = build_block(cfg.model_copy(update={"bias_policy": policy}))
        probe_set = make_probes(block, probes, probe_batch, np.random.default_rng(rng_seed))
        out[label] = embed_grad_norm(block, probe_set)
    a, b, c = out["zero-conv/default-embed"], out["zero/zero"], out["default-conv/zero-embed"]
    return {
        "embed_grad_norm": out,
        "expected_ordering": "zero-conv/default-embed >= zero/zero >= default-conv/zero-embed",
        "ordering_holds": bool(a >= b >= c),
        "config": cfg.model_dump(mode="json"),
    }
