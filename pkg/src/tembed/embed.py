"""Timestep embeddings: ConcatConv, its additive decomposition, sinusoidal
features with MLP branches, and positional (spatial) embeddings.

Times may be a scalar or a per-sample vector of length N.  Channel
embeddings come back shaped ``(C,)`` / ``(N, C)``; positional ones ``(H, W)``
/ ``(N, H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import ActivationKind, Padding, Tensor, activation, as_tensor, concat_channels, conv2d

__all__ = [
    "ConcatConvParams",
    "DecomposedParams",
    "EmbedMlp",
    "MlpBranch",
    "PositionalLinearParams",
    "SinusoidalSpec",
    "add_channel_offset",
    "add_positional_offset",
    "concat_conv",
    "decompose_concat_conv",
    "embed_channel",
    "embed_positional",
    "init_mlp_branch",
    "sinusoidal",
    "time_plane",
]


def _times(t) -> np.ndarray:
    return np.asarray(t, dtype=np.float64)


@dataclass
class ConcatConvParams:
    kernel: Tensor  # (C_out, C_in + 1, k, k); last input channel reads the time plane
    bias: Tensor | None = None
    padding: Padding = Padding.SAME_ZERO

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1] - 1


@dataclass
class DecomposedParams:
    reduced_kernel: Tensor  # (C_out, C_in, k, k)
    offset: Tensor  # (C_out,): spatial sum of the time-channel slice


def time_plane(t, n: int, h: int, w: int) -> np.ndarray:
    """``t * J`` as an (N, 1, H, W) array; ``t`` scalar or length-N."""
    tv = _times(t)
    if tv.ndim == 0:
        return np.full((n, 1, h, w), float(tv))
    if tv.shape != (n,):
        raise ConfigError(f"per-sample times must have shape ({n},), got {tv.shape}")
    return np.broadcast_to(tv[:, None, None, None], (n, 1, h, w)).copy()


def concat_conv(x, t, params: ConcatConvParams) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != params.in_channels:
        raise ConfigError(f"concat_conv expects {params.in_channels} input channels, got shape {x.shape}")
    n, _, h, w = x.shape
    stacked = concat_channels(x, Tensor(time_plane(t, n, h, w)))
    return conv2d(stacked, params.kernel, params.bias, params.padding)


def decompose_concat_conv(params: ConcatConvParams) -> DecomposedParams:
    kernel = params.kernel
    reduced = kernel[:, :-1]
    offset = kernel[:, -1].sum(axis=(1, 2))
    return DecomposedParams(reduced, offset)


def add_channel_offset(z: Tensor, offset) -> Tensor:
    """Broadcast a ``(C,)`` or ``(N, C)`` offset over the spatial axes of ``z``."""
    offset = as_tensor(offset)
    c = z.shape[1]
    if offset.shape[-1] != c:
        raise ConfigError(f"channel offset has {offset.shape[-1]} entries, feature map has {c} channels")
    if offset.ndim == 1:
        return z + offset.reshape(1, c, 1, 1)
    return z + offset.reshape(offset.shape[0], c, 1, 1)


def add_positional_offset(z: Tensor, pos) -> Tensor:
    """Broadcast an ``(H, W)`` or ``(N, H, W)`` map over every channel of ``z``."""
    pos = as_tensor(pos)
    h, w = z.shape[2], z.shape[3]
    if pos.shape[-2:] != (h, w):
        raise ConfigError(f"positional map {pos.shape[-2:]} does not match feature map {(h, w)}")
    if pos.ndim == 2:
        return z + pos.reshape(1, 1, h, w)
    return z + pos.reshape(pos.shape[0], 1, h, w)


# ---------------------------------------------------------------- sinusoidal


@dataclass(frozen=True)
class SinusoidalSpec:
    dim: int = 16
    base: float = 10000.0

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ConfigError(f"sinusoidal dim must be a positive even number, got {self.dim}")

    @property
    def frequencies(self) -> np.ndarray:
        half = self.dim // 2
        return self.base ** (-np.arange(half) / half)


def sinusoidal(t, spec: SinusoidalSpec) -> np.ndarray:
    """``[sin(w_0 t) .. sin(w_{d/2-1} t), cos(w_0 t) .. cos(w_{d/2-1} t)]``."""
    tv = _times(t)
    phase = tv[..., None] * spec.frequencies
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


@dataclass
class MlpBranch:
    """affine -> activation -> affine."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    act: ActivationKind = ActivationKind.SILU

    @property
    def out_features(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, features) -> Tensor:
        hidden = activation(as_tensor(features) @ self.w1 + self.b1, self.act)
        return hidden @ self.w2 + self.b2


def init_mlp_branch(
    rng: np.random.Generator,
    in_features: int,
    hidden: int,
    out_features: int,
    act: ActivationKind = ActivationKind.SILU,
    default_bias: bool = True,
) -> MlpBranch:
    """Weights and (optionally) biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""

    def layer(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        if not default_bias:
            b = np.zeros(fan_out)
        return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)

    w1, b1 = layer(in_features, hidden)
    w2, b2 = layer(hidden, out_features)
    return MlpBranch(w1, b1, w2, b2, ActivationKind(act))


@dataclass
class EmbedMlp:
    """Channel branch (C outputs) and optional positional branch (H*W outputs)
    reading the same sinusoidal feature vector."""

    channel: MlpBranch | None
    positional: MlpBranch | None = None
    spec: SinusoidalSpec = field(default_factory=SinusoidalSpec)

    def parameters(self) -> list[Tensor]:
        out = []
        for branch in (self.channel, self.positional):
            if branch is not None:
                out += branch.parameters()
        return out


@dataclass
class PositionalLinearParams:
    p: Tensor  # (H, W), shared across channels


def embed_channel(t, mlp: EmbedMlp | MlpBranch, spec: SinusoidalSpec | None = None) -> Tensor:
    branch = mlp.channel if isinstance(mlp, EmbedMlp) else mlp
    if spec is None:
        spec = mlp.spec if isinstance(mlp, EmbedMlp) else SinusoidalSpec()
    if branch is None:
        raise ConfigError("MLP has no channel branch")
    return branch(sinusoidal(t, spec))


def embed_positional(
    t,
    which: PositionalLinearParams | MlpBranch,
    geometry: tuple[int, int],
    spec: SinusoidalSpec | None = None,
) -> Tensor:
    h, w = geometry
    tv = _times(t)
    if isinstance(which, PositionalLinearParams):
        if which.p.shape != (h, w):
            raise ConfigError(f"positional parameter shape {which.p.shape} != {(h, w)}")
        if tv.ndim == 0:
            return which.p * float(tv)
        return which.p.reshape(1, h, w) * tv[:, None, None]
    if which.out_features != h * w:
        raise ConfigError(f"positional branch emits {which.out_features} values, geometry needs {h * w}")
    flat = which(sinusoidal(tv, spec or SinusoidalSpec()))
    return flat.reshape((h, w) if tv.ndim == 0 else (tv.shape[0], h, w))
