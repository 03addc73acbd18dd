"""Batch, layer, instance and group normalization as one operation.

All four kinds are mean/std normalization over a *normalization unit*; they
differ only in which axes of ``(N, C, H, W)`` a unit spans.  The number of
channels inside one unit decides whether a per-channel additive offset can
survive the normalization.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, _make, as_tensor

__all__ = ["NormKind", "NormSpec", "channels_per_unit", "default_groups", "normalize"]


class NormKind(str, enum.Enum):
    BATCH = "batch"
    LAYER = "layer"
    INSTANCE = "instance"
    GROUP = "group"


@dataclass(frozen=True)
class NormSpec:
    kind: NormKind
    groups: int | None = None
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "kind", NormKind(self.kind))
        if self.kind is NormKind.GROUP:
            if self.groups is None or self.groups < 1:
                raise ConfigError("group normalization needs a positive group count")
        elif self.groups is not None:
            raise ConfigError(f"groups is only meaningful for group normalization, not {self.kind.value}")
        if self.eps < 0:
            raise ConfigError("eps must be non-negative")

    @classmethod
    def group(cls, groups: int, eps: float = 1e-5) -> NormSpec:
        return cls(NormKind.GROUP, groups, eps)

    def validate(self, channels: int) -> None:
        if self.kind is NormKind.GROUP and channels % self.groups:
            raise ConfigError(f"group count {self.groups} does not divide channel count {channels}")

    @property
    def label(self) -> str:
        return f"group({self.groups})" if self.kind is NormKind.GROUP else self.kind.value


def default_groups(channels: int) -> int:
    """The ``min(C/4, 32)`` group-count convention (at least one group)."""
    return max(1, min(channels // 4, 32))


def channels_per_unit(spec: NormSpec, channels: int) -> int:
    spec.validate(channels)
    if spec.kind in (NormKind.BATCH, NormKind.INSTANCE):
        return 1
    if spec.kind is NormKind.LAYER:
        return channels
    return channels // spec.groups


def _unit_view(x: np.ndarray, spec: NormSpec) -> tuple[np.ndarray, tuple[int, ...]]:
    """Reshape so that each normalization unit is reduced over the returned axes."""
    n, c, h, w = x.shape
    if spec.kind is NormKind.BATCH:
        return x, (0, 2, 3)
    if spec.kind is NormKind.INSTANCE:
        return x, (2, 3)
    if spec.kind is NormKind.LAYER:
        return x, (1, 2, 3)
    g = spec.groups
    return x.reshape(n, g, c // g, h, w), (2, 3, 4)


def normalize(x, spec: NormSpec, gamma=None, beta=None) -> Tensor:
    """``(x - mean_u) / sqrt(var_u + eps)`` per unit, then optional per-channel affine.

    Variance is the population variance of the unit.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ConfigError(f"normalize expects (N, C, H, W), got shape {x.shape}")
    spec.validate(x.shape[1])
    xv, axes = _unit_view(x.data, spec)
    mu = xv.mean(axis=axes, keepdims=True)
    centered = xv - mu
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + spec.eps)
    yhat_v = centered * inv_std

    def _bw(g):
        gv = g.reshape(yhat_v.shape)
        gm = gv.mean(axis=axes, keepdims=True)
        gym = np.mean(gv * yhat_v, axis=axes, keepdims=True)
        return (((gv - gm - yhat_v * gym) * inv_std).reshape(x.shape),)

    out = _make(yhat_v.reshape(x.shape), (x,), _bw, f"norm[{spec.label}]")
    c = x.shape[1]
    if gamma is not None:
        out = out * as_tensor(gamma).reshape(1, c, 1, 1)
    if beta is not None:
        out = out + as_tensor(beta).reshape(1, c, 1, 1)
    return out
