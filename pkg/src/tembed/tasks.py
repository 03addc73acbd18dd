"""Small regression tasks that a time-blind block provably cannot solve.

Field regression fits ``block(h, t)`` to a teacher field ``g(h, t)``.  Its
floor ``L*`` is the error of the best map that ignores ``t``; the evaluation
MSE and ``L*`` share one Gauss-Legendre rule in ``t``, so a model whose output
does not depend on ``t`` can never score below ``L*`` on the eval set.

Trajectory regression integrates ``dh/dt = block(h, t)`` with fixed-step RK4
and matches analytic teacher states at a few snapshot times.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .blocks import Block, build_block
from .config import RunConfig, SolverConfig, TaskConfig, TeacherKind, TrainConfig
from .errors import ConfigError, DivergenceError, NumericalError
from .ode import dopri5_solve, rk4_path
from .tensor import Tensor, backward, tsum

__all__ = [
    "Adam",
    "FieldDataset",
    "Sgd",
    "TeacherField",
    "TrainResult",
    "gen_field_dataset",
    "make_teacher",
    "quadrature",
    "run_task",
    "time_blind_floor",
    "train_field_regression",
    "train_trajectory",
]


# ---------------------------------------------------------------- teachers


class TeacherField:
    """Analytic field ``g(h, t)`` acting channel-wise at every spatial position."""

    def __init__(self, kind: TeacherKind | str, channels: int, *, kappa: float = 2.0,
                 amplitude: float = 1.0, seed: int = 1234, static: bool = False):
        self.kind = TeacherKind(kind)
        self.channels = channels
        self.kappa = float(kappa)
        self.static = static  # drop the time factor (test plumbing: L* = 0)
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((channels, channels))
        self.A = amplitude * a / np.linalg.norm(a, 2)

    def gain(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.static:
            return np.ones_like(t)
        if self.kind is TeacherKind.SINE_GATE:
            return np.sin(2 * np.pi * t)
        return self.kappa * np.cos(np.pi * t)

    def _operator(self, h: np.ndarray) -> np.ndarray:
        if self.kind is TeacherKind.SINE_GATE:
            return np.einsum("dc,nc...->nd...", self.A, h)
        return h

    def __call__(self, h, t) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        if h.shape[1] != self.channels:
            raise ConfigError(f"teacher has {self.channels} channels, state has {h.shape[1]}")
        g = np.asarray(self.gain(t))
        if g.ndim == 1:
            g = g.reshape((-1,) + (1,) * (h.ndim - 1))
        return g * self._operator(h)

    def flow(self, h0, t: float) -> np.ndarray:
        """Exact solution of ``dh/dt = g(h, t)`` from ``h(0) = h0``."""
        h0 = np.asarray(h0, dtype=np.float64)
        if self.static:
            integral = t
        elif self.kind is TeacherKind.SINE_GATE:
            integral = (1 - math.cos(2 * math.pi * t)) / (2 * math.pi)
        else:
            integral = (self.kappa / math.pi) * math.sin(math.pi * t)
        if self.kind is TeacherKind.PULSE_REVERSE:
            return h0 * math.exp(integral)
        return np.einsum("dc,nc...->nd...", expm(integral * self.A), h0)


def make_teacher(task: TaskConfig, channels: int) -> TeacherField:
    return TeacherField(task.teacher, channels, kappa=task.kappa, amplitude=task.amplitude, seed=task.teacher_seed)


# ---------------------------------------------------------------- data


@dataclass
class FieldDataset:
    h: np.ndarray  # (n, C, H, W)
    t: np.ndarray  # (n,)
    g: np.ndarray  # (n, C, H, W)

    def __len__(self) -> int:
        return self.h.shape[0]


def gen_field_dataset(teacher: TeacherField, n: int, rng: np.random.Generator,
                      geometry: tuple[int, int] = (4, 4)) -> FieldDataset:
    if n < 1:
        raise ConfigError("dataset size must be at least 1")
    h = rng.standard_normal((n, teacher.channels) + tuple(geometry))
    t = rng.uniform(0.0, 1.0, size=n)
    return FieldDataset(h, t, teacher(h, t))


def quadrature(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]; weights sum to 1."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    return (x + 1) / 2, w / 2


def time_blind_floor(teacher: TeacherField, data: FieldDataset | np.ndarray, nodes: int = 32) -> float:
    """``E_h E_t |g(h,t) - E_t g(h,t)|^2`` per element, by quadrature in ``t``."""
    h = data.h if isinstance(data, FieldDataset) else np.asarray(data, dtype=np.float64)
    ts, ws = quadrature(nodes)
    gs = np.stack([teacher(h, t) for t in ts])
    gbar = np.tensordot(ws, gs, axes=1)
    return float(np.tensordot(ws, ((gs - gbar) ** 2).mean(axis=tuple(range(1, gs.ndim))), axes=1))


def quadrature_mse(model: Callable[[np.ndarray, float], np.ndarray], teacher: TeacherField,
                   h: np.ndarray, nodes: int = 32) -> float:
    """Same rule as :func:`time_blind_floor`; one shared ``t`` per evaluation batch."""
    ts, ws = quadrature(nodes)
    errs = [float(np.mean((model(h, t) - teacher(h, t)) ** 2)) for t in ts]
    return float(np.dot(ws, errs))


# ---------------------------------------------------------------- optimizers


class Sgd:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.buf = [np.zeros(p.shape) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.buf[i] = self.momentum * self.buf[i] + g
            p.data = _frozen(p.data - self.lr * self.buf[i])


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            update = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = _frozen(p.data - update)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def make_optimizer(params: list[Tensor], cfg: TrainConfig):
    return Adam(params, cfg.lr) if cfg.optimizer == "adam" else Sgd(params, cfg.lr)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    task: str
    final_mse: float
    floor: float | None
    loss_over_floor: float | None
    initial_mse: float
    grad_norms: dict[str, float]
    nfe: int | None
    steps: int
    wall_clock_s: float | None
    rows: list[dict] = field(default_factory=list, repr=False)
    extras: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {
            "task": self.task,
            "final_mse": self.final_mse,
            "floor": self.floor,
            "loss_over_floor": self.loss_over_floor,
            "initial_mse": self.initial_mse,
            "grad_norms": self.grad_norms,
            "nfe": self.nfe,
            "steps": self.steps,
        }
        if self.wall_clock_s is not None:
            out["wall_clock_s"] = self.wall_clock_s
        out.update(self.extras)
        return out


def _group_norms(block: Block, names: list[str], grads: list[np.ndarray]) -> dict[str, float]:
    by_name = dict(zip(names, grads))
    return {
        group: float(np.sqrt(sum(float(np.sum(by_name[n] ** 2)) for n in members)))
        for group, members in block.parameter_groups().items()
    }


def _block_field(block: Block, geometry: tuple[int, ...]):
    def f(y: np.ndarray, t: float) -> np.ndarray:
        return block.forward(y.reshape(geometry), t).data.reshape(y.shape)
    return f


def _dopri5_nfe(block: Block, h0: np.ndarray, solver: SolverConfig) -> int:
    return dopri5_solve(_block_field(block, h0.shape), h0.ravel(), 0.0, 1.0, solver).nfe


def _fit(block: Block, loss_fn, train: TrainConfig, rng: np.random.Generator,
         floor: float | None, clock: Callable[[], float] | None):
    named = block.named_parameters()
    names = list(named)
    params = [named[n] for n in names]
    opt = make_optimizer(params, train)
    rows, grad_norms = [], {}
    start = clock() if clock else None
    for step in range(train.steps + 1):
        try:
            loss = loss_fn(rng)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError("non-finite loss")
            grads = backward(loss, params)
        except NumericalError as err:
            raise DivergenceError(step, f"training diverged at step {step}: {err}") from None
        if step % train.log_every == 0 or step == train.steps:
            grad_norms = _group_norms(block, names, grads)
            rows.append({
                "step": step,
                "loss": value,
                "loss_over_floor": value / floor if floor else None,
                "embed_grad_norm": grad_norms["embed"],
                "time_elapsed_s": clock() - start if clock else None,
            })
        if step == train.steps:
            break
        opt.step(grads)
        if not all(np.all(np.isfinite(p.data)) for p in params):
            raise DivergenceError(step, f"parameters became non-finite at step {step}")
    return rows, grad_norms, (clock() - start if clock else None)


def train_field_regression(block: Block, teacher: TeacherField, train: TrainConfig | None = None,
                           task: TaskConfig | None = None, seed: int = 0,
                           solver: SolverConfig | None = None) -> TrainResult:
    train = train or TrainConfig()
    task = task or TaskConfig()
    if block.cfg.channels != teacher.channels:
        raise ConfigError(f"block has {block.cfg.channels} channels, teacher has {teacher.channels}")
    if not block.cfg.preserves_shape:
        raise ConfigError("field regression needs a shape-preserving block (same_zero padding or kernel_size 1)")
    geometry = (block.cfg.height, block.cfg.width)
    eval_h = np.random.default_rng([task.teacher_seed, 1]).standard_normal((task.n_eval, teacher.channels) + geometry)
    floor = time_blind_floor(teacher, eval_h, task.quadrature_nodes)

    def model(h, t):
        return block.forward(h, t).data

    def loss_fn(rng):
        batch = gen_field_dataset(teacher, train.batch_size, rng, geometry)
        diff = block.forward(batch.h, batch.t) - batch.g
        return tsum(diff * diff) * (1.0 / diff.data.size)

    initial = quadrature_mse(model, teacher, eval_h, task.quadrature_nodes)
    rng = np.random.default_rng([seed, 2])
    clock = time.perf_counter if train.record_timing else None
    rows, grad_norms, elapsed = _fit(block, loss_fn, train, rng, floor, clock)
    final = quadrature_mse(model, teacher, eval_h, task.quadrature_nodes)
    nfe = _dopri5_nfe(block, eval_h[:4], solver or SolverConfig())
    return TrainResult("field_regression", final, floor, final / floor if floor else None, initial,
                       grad_norms, nfe, train.steps, elapsed, rows)


def train_trajectory(block: Block, teacher: TeacherField, snapshots=(0.5, 1.0),
                     train: TrainConfig | None = None, task: TaskConfig | None = None,
                     seed: int = 0, solver: SolverConfig | None = None) -> TrainResult:
    train = train or TrainConfig()
    task = task or TaskConfig()
    snapshots = [float(s) for s in snapshots]
    if not snapshots or any(not (0 < s <= 1) for s in snapshots):
        raise ConfigError("snapshots must lie in (0, 1]")
    if block.cfg.channels != teacher.channels or not block.cfg.preserves_shape:
        raise ConfigError("trajectory task needs a shape-preserving block with the teacher's channel count")
    n = train.rk4_steps
    index = {}
    for s in snapshots:
        i = s * n
        if abs(i - round(i)) > 1e-9:
            raise ConfigError(f"snapshot {s} is not on the RK4 grid of {n} steps")
        index[s] = int(round(i))
    geometry = (block.cfg.height, block.cfg.width)

    def states(h0):
        path = rk4_path(block.forward, Tensor(h0), 0.0, 1.0, n)
        return [path[index[s]] for s in snapshots]

    def loss_of(h0) -> Tensor:
        total = None
        for s, y in zip(snapshots, states(h0)):
            diff = y - teacher.flow(h0, s)
            term = tsum(diff * diff) * (1.0 / diff.data.size)
            total = term if total is None else total + term
        return total

    active = task.active_channels or teacher.channels
    if active > teacher.channels:
        raise ConfigError(f"active_channels={active} exceeds the {teacher.channels} state channels")

    def initial_states(rng, n):
        h0 = rng.standard_normal((n, teacher.channels) + geometry)
        h0[:, active:] = 0.0  # augmented channels start (and, under the teacher, stay) at zero
        return h0

    eval_h = initial_states(np.random.default_rng([task.teacher_seed, 1]), task.n_eval)

    def evaluate() -> float:
        return loss_of(eval_h).item()

    def loss_fn(rng):
        return loss_of(initial_states(rng, train.batch_size))

    initial = evaluate()
    rng = np.random.default_rng([seed, 2])
    clock = time.perf_counter if train.record_timing else None
    rows, grad_norms, elapsed = _fit(block, loss_fn, train, rng, None, clock)
    final = evaluate()
    solver = solver or SolverConfig()
    h0 = eval_h[:4]
    res = dopri5_solve(_block_field(block, h0.shape), h0.ravel(), 0.0, 1.0, solver, sample_times=snapshots)
    dopri_mse = sum(float(np.mean((res.trajectory[s].reshape(h0.shape) - teacher.flow(h0, s)) ** 2))
                    for s in snapshots)
    return TrainResult("trajectory", final, None, None, initial, grad_norms, res.nfe, train.steps, elapsed, rows,
                       {"snapshots": snapshots, "dopri5_mse": dopri_mse})


def run_task(cfg: RunConfig) -> tuple[Block, TrainResult]:
    """Build the configured block and train it on the configured task."""
    cfg = cfg.resolved()
    block = build_block(cfg.block)
    teacher = make_teacher(cfg.task, cfg.block.channels)
    if cfg.task.name == "field_regression":
        result = train_field_regression(block, teacher, cfg.train, cfg.task, cfg.seed, cfg.solver)
    else:
        result = train_trajectory(block, teacher, cfg.task.snapshots, cfg.train, cfg.task, cfg.seed, cfg.solver)
    return block, result
