"""Numerical lab for timestep embeddings in normalized convolutional blocks."""

from .blocks import Block, build_block, concat_to_additive
from .config import BlockConfig, RunConfig, block_config, load_run_config, parse_run_config
from .diagnostics import DiagnosticsReport, Verdict, diagnose, time_sensitivity
from .errors import ConfigError, DivergenceError, NumericalError, StiffnessError, TembedError
from .ode import SolveResult, dopri5_solve, rk4_solve
from .tensor import Tensor, backward

__all__ = [
    "Block",
    "BlockConfig",
    "ConfigError",
    "DiagnosticsReport",
    "DivergenceError",
    "NumericalError",
    "RunConfig",
    "SolveResult",
    "StiffnessError",
    "TembedError",
    "Tensor",
    "Verdict",
    "backward",
    "block_config",
    "build_block",
    "concat_to_additive",
    "diagnose",
    "dopri5_solve",
    "load_run_config",
    "parse_run_config",
    "rk4_solve",
    "time_sensitivity",
]
