"""Integrators for ``dh/dt = f(h, t)``.

``dopri5_solve`` is the adaptive Dormand-Prince 5(4) pair with FSAL, used for
evaluation and NFE reporting.  ``rk4_solve`` is classical fixed-step RK4 built
from tape-tracked operations, so gradients flow through the unrolled steps.

NFE accounting contract for dopri5: one evaluation at the initial point, then
six per attempted step (accepted or rejected), i.e.
``nfe == 1 + 6 * (steps_accepted + steps_rejected)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import SolverConfig
from .errors import ConfigError, NumericalError, StiffnessError
from .tensor import Tensor

__all__ = ["SolveResult", "dopri5_solve", "rk4_path", "rk4_solve"]

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass
class SolveResult:
    y_final: np.ndarray
    t_final: float
    nfe: int
    steps_accepted: int
    steps_rejected: int
    trajectory: dict[float, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "y_final": np.asarray(self.y_final).tolist(),
            "t_final": self.t_final,
            "nfe": self.nfe,
            "steps_accepted": self.steps_accepted,
            "steps_rejected": self.steps_rejected,
            "trajectory": [{"t": t, "y": np.asarray(y).tolist()} for t, y in sorted(self.trajectory.items())],
        }


def dopri5_solve(
    f: Callable[[np.ndarray, float], np.ndarray],
    y0,
    t0: float,
    t1: float,
    cfg: SolverConfig | None = None,
    sample_times=(),
) -> SolveResult:
    cfg = cfg or SolverConfig()
    if not t1 > t0:
        raise ConfigError(f"dopri5 needs t1 > t0, got [{t0}, {t1}]")
    span = t1 - t0
    y = np.array(y0, dtype=np.float64)
    samples = sorted(float(s) for s in sample_times)
    if any(not (t0 < s <= t1) for s in samples):
        raise ConfigError("sample times must lie in (t0, t1]")
    targets = [s for s in samples if s < t1] + [t1]

    def call(yv, tv):
        out = np.asarray(f(yv, tv), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"vector field returned non-finite values at t={tv}")
        return out

    t = float(t0)
    h = cfg.initial_step or 0.1 * span
    k = [None] * 7
    k[0] = call(y, t)
    nfe, accepted, rejected = 1, 0, 0
    trajectory: dict[float, np.ndarray] = {}
    ti = 0

    def partial():
        return SolveResult(y.copy(), t, nfe, accepted, rejected, dict(trajectory))

    while ti < len(targets):
        target = targets[ti]
        if accepted + rejected >= cfg.max_steps:
            raise StiffnessError(f"max_steps={cfg.max_steps} exceeded at t={t}", partial())
        if h < 1e-12 * span:
            raise StiffnessError(f"step size underflow (h={h:.3e}) at t={t}", partial())
        step = min(h, target - t)
        for s in range(1, 7):
            acc = sum(a * k[j] for j, a in enumerate(_A[s]) if a != 0.0)
            k[s] = call(y + step * acc, t + _C[s] * step)
        nfe += 6
        y_new = y + step * sum(b * k[j] for j, b in enumerate(_B5) if b != 0.0)
        err = step * sum(e * k[j] for j, e in enumerate(_E) if e != 0.0)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if err_norm <= 1.0:
            accepted += 1
            t = float(target) if step == target - t else t + step
            y = y_new
            k[0] = k[6]
            factor = cfg.max_factor if err_norm == 0.0 else cfg.safety * err_norm ** -0.2
            factor = min(cfg.max_factor, max(cfg.min_factor, factor))
            if t == target:
                if target in samples:
                    trajectory[target] = y.copy()
                ti += 1
        else:
            rejected += 1
            factor = min(1.0, max(cfg.min_factor, cfg.safety * err_norm ** -0.2))
        h = step * factor

    if t1 in samples:
        trajectory[t1] = y.copy()
    return SolveResult(y, t, nfe, accepted, rejected, trajectory)


def rk4_path(f: Callable[[Tensor, float], Tensor], y0, t0: float, t1: float, n_steps: int) -> list[Tensor]:
    """States at every grid point ``t0 + i * (t1 - t0) / n_steps``, tape-tracked."""
    if n_steps < 1:
        raise ConfigError("rk4 needs at least one step")
    y = y0 if isinstance(y0, Tensor) else Tensor(y0)
    h = (t1 - t0) / n_steps
    path = [y]
    for i in range(n_steps):
        t = t0 + i * h
        k1 = f(y, t)
        k2 = f(y + k1 * (h / 2), t + h / 2)
        k3 = f(y + k2 * (h / 2), t + h / 2)
        k4 = f(y + k3 * h, t + h)
        y = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6)
        path.append(y)
    return path


def rk4_solve(f: Callable[[Tensor, float], Tensor], y0, t0: float, t1: float, n_steps: int) -> Tensor:
    return rk4_path(f, y0, t0, t1, n_steps)[-1]
