"""Typed configuration documents.

Everything a run needs is described by :class:`RunConfig`; unknown keys are
rejected at every level and validation errors name the offending field.
"""

from __future__ import annotations

import enum
import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .norm import NormKind, NormSpec
from .tensor import ActivationKind, Padding

SEED_ENV = "TEMBED_SEED"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, use_enum_values=False)


class Pipeline(str, enum.Enum):
    NODE_CONCAT_CONV = "node_concat_conv"
    NODE_ADDITIVE = "node_additive"
    DDPM = "ddpm"


class EmbeddingKind(str, enum.Enum):
    LINEAR = "linear"
    SINUSOIDAL_MLP = "sinusoidal_mlp"


class BiasInit(str, enum.Enum):
    ZERO = "zero"
    DEFAULT = "default"


class BiasPolicy(_Strict):
    conv_bias: BiasInit = BiasInit.DEFAULT
    embed_bias: BiasInit = BiasInit.DEFAULT

    @property
    def label(self) -> str:
        return f"conv={self.conv_bias.value},embed={self.embed_bias.value}"


class NormConfig(_Strict):
    kind: NormKind = NormKind.GROUP
    groups: int | None = Field(default=None, ge=1)
    eps: float = Field(default=1e-5, ge=0.0)

    @model_validator(mode="after")
    def _groups_only_for_group(self):
        if self.kind is NormKind.GROUP and self.groups is None:
            raise ValueError("norm.groups is required when norm.kind is 'group'")
        if self.kind is not NormKind.GROUP and self.groups is not None:
            raise ValueError(f"norm.groups is not allowed for norm.kind '{self.kind.value}'")
        return self

    def spec(self) -> NormSpec:
        return NormSpec(self.kind, self.groups, self.eps)


class BlockConfig(_Strict):
    pipeline: Pipeline = Pipeline.NODE_ADDITIVE
    channels: int = Field(default=16, ge=1)
    kernel_size: Literal[1, 3, 5] = 3
    height: int = Field(default=8, ge=1)
    width: int = Field(default=8, ge=1)
    norm: NormConfig = NormConfig(kind=NormKind.GROUP, groups=4)
    activation: ActivationKind = ActivationKind.RELU
    padding: Padding = Padding.SAME_ZERO
    embedding: EmbeddingKind = EmbeddingKind.LINEAR
    positional: EmbeddingKind | None = None
    bias_policy: BiasPolicy = BiasPolicy()
    weight_std: float | None = Field(default=None, gt=0.0)
    sinusoidal_dim: int = Field(default=16, ge=2)
    mlp_hidden: int | None = Field(default=None, ge=1)
    seed: int | None = None

    @field_validator("sinusoidal_dim")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("sinusoidal_dim must be even")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        if self.norm.kind is NormKind.GROUP and self.channels % self.norm.groups:
            raise ValueError(f"norm.groups={self.norm.groups} must divide channels={self.channels}")
        if self.pipeline is Pipeline.NODE_CONCAT_CONV and self.embedding is not EmbeddingKind.LINEAR:
            raise ValueError("node_concat_conv carries its timestep path in the kernel; embedding must be 'linear'")
        if self.padding is Padding.VALID:
            shrink = 2 * (self.kernel_size - 1)
            if self.height <= shrink or self.width <= shrink:
                raise ValueError(
                    f"valid padding with kernel_size={self.kernel_size} needs height and width > {shrink}"
                )
        return self

    @property
    def hidden_width(self) -> int:
        return self.mlp_hidden or 4 * max(self.channels, self.height * self.width)

    @property
    def preserves_shape(self) -> bool:
        return self.padding is Padding.SAME_ZERO or self.kernel_size == 1


class TeacherKind(str, enum.Enum):
    SINE_GATE = "sine_gate"
    PULSE_REVERSE = "pulse_reverse"


class TaskConfig(_Strict):
    name: Literal["field_regression", "trajectory"] = "field_regression"
    teacher: TeacherKind = TeacherKind.SINE_GATE
    kappa: float = 2.0
    amplitude: float = 1.0
    snapshots: list[float] = [0.5, 1.0]
    n_eval: int = Field(default=256, ge=1)
    quadrature_nodes: int = Field(default=32, ge=2)
    teacher_seed: int = 1234
    active_channels: int | None = Field(default=None, ge=1)  # trajectory: zero-pad channels beyond this

    @field_validator("snapshots")
    @classmethod
    def _snapshots(cls, v):
        if not v:
            raise ValueError("at least one snapshot time is required")
        if any(not (0.0 < s <= 1.0) for s in v) or sorted(v) != list(v) or len(set(v)) != len(v):
            raise ValueError("snapshots must be strictly increasing times in (0, 1]")
        return v


class TrainConfig(_Strict):
    optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = Field(default=1e-3, gt=0.0)
    steps: int = Field(default=2000, ge=1)
    batch_size: int = Field(default=64, ge=1)
    log_every: int = Field(default=50, ge=1)
    rk4_steps: int = Field(default=8, ge=1)
    record_timing: bool = False


class SolverConfig(_Strict):
    rtol: float = Field(default=1e-3, gt=0.0)
    atol: float = Field(default=1e-3, gt=0.0)
    initial_step: float | None = Field(default=None, gt=0.0)
    max_steps: int = Field(default=10000, gt=0)
    safety: float = Field(default=0.9, gt=0.0, le=1.0)
    min_factor: float = Field(default=0.2, gt=0.0, le=1.0)
    max_factor: float = Field(default=10.0, ge=1.0)


class DiagnosticsConfig(_Strict):
    probes: int = Field(default=8, ge=2)
    t_grid: int = Field(default=32, ge=2)
    probe_batch: int = Field(default=2, ge=1)
    sensitivity_threshold: float = Field(default=1e-9, gt=0.0)
    grad_threshold: float = Field(default=1e-12, gt=0.0)
    dt_step: float = Field(default=1e-4, gt=0.0)
    scales: list[float] = [1.0, 10.0, 100.0]

    @field_validator("scales")
    @classmethod
    def _scales(cls, v):
        if len(v) < 3 or any(s <= 0 for s in v):
            raise ValueError("scales needs at least three positive values")
        return v


class RunConfig(_Strict):
    block: BlockConfig = BlockConfig()
    task: TaskConfig = TaskConfig()
    train: TrainConfig = TrainConfig()
    solver: SolverConfig = SolverConfig()
    diagnostics: DiagnosticsConfig = DiagnosticsConfig()
    seed: int = 0
    out_dir: str | None = None

    def resolved(self) -> RunConfig:
        """Fill derived defaults so the echoed config fully determines the run."""
        block = self.block
        updates = {}
        if block.seed is None:
            updates["seed"] = self.seed
        if block.mlp_hidden is None:
            updates["mlp_hidden"] = block.hidden_width
        if updates:
            block = block.model_copy(update=updates)
        return self.model_copy(update={"block": block})

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


def _format_validation_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def parse_run_config(data: dict, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    data = dict(data)
    if env.get(SEED_ENV) not in (None, ""):
        try:
            data["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    try:
        return RunConfig.model_validate(data).resolved()
    except ValidationError as err:
        raise ConfigError(_format_validation_error(err)) from None


def load_run_config(path: str | Path, env: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_run_config(data, env)


def block_config(**overrides) -> BlockConfig:
    """Validated BlockConfig from keyword overrides (ConfigError on failure)."""
    try:
        return BlockConfig.model_validate(overrides)
    except ValidationError as err:
        raise ConfigError(_format_validation_error(err)) from None
