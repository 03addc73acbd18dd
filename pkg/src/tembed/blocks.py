"""NODE-style and DDPM-style time-dependent blocks.

Pipelines (``norm`` is whatever the config selects):

* ``node_concat_conv``: norm, act, ConcatConv, norm, act, ConcatConv, norm
* ``node_additive``:    norm, act, conv, +emb, norm, act, conv, +emb, norm
* ``ddpm``:             x + conv(act(norm(conv(act(norm(x))) + emb)))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import BiasInit, BlockConfig, EmbeddingKind, Pipeline, block_config
from .embed import (
    ConcatConvParams,
    MlpBranch,
    PositionalLinearParams,
    SinusoidalSpec,
    add_channel_offset,
    add_positional_offset,
    concat_conv,
    embed_channel,
    embed_positional,
    init_mlp_branch,
)
from .errors import ConfigError
from .norm import normalize
from .tensor import Padding, Tensor, activation, as_tensor, concat, conv2d

__all__ = ["Block", "Insertion", "build_block", "concat_to_additive"]


@dataclass
class Insertion:
    """Timestep parameters feeding one embedding insertion point."""

    v: Tensor | None = None  # linear channel embedding, offset t * v
    mlp: MlpBranch | None = None  # sinusoidal channel embedding
    pos_p: Tensor | None = None  # linear positional embedding, map t * p
    pos_mlp: MlpBranch | None = None  # sinusoidal positional embedding

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        if self.v is not None:
            out[f"{prefix}.v"] = self.v
        if self.mlp is not None:
            out.update({f"{prefix}.mlp.{k}": p for k, p in zip(("w1", "b1", "w2", "b2"), self.mlp.parameters())})
        if self.pos_p is not None:
            out[f"{prefix}.pos.p"] = self.pos_p
        if self.pos_mlp is not None:
            out.update(
                {f"{prefix}.pos_mlp.{k}": p for k, p in zip(("w1", "b1", "w2", "b2"), self.pos_mlp.parameters())}
            )
        return out

    def channel_offset(self, t, spec: SinusoidalSpec) -> Tensor | None:
        if self.v is not None:
            tv = np.asarray(t, dtype=np.float64)
            if tv.ndim == 0:
                return self.v * float(tv)
            return self.v.reshape(1, -1) * tv[:, None]
        if self.mlp is not None:
            return embed_channel(t, self.mlp, spec)
        return None

    def positional(self, t, geometry, spec: SinusoidalSpec) -> Tensor | None:
        if self.pos_p is not None:
            return embed_positional(t, PositionalLinearParams(self.pos_p), geometry)
        if self.pos_mlp is not None:
            return embed_positional(t, self.pos_mlp, geometry, spec)
        return None

    def apply(self, z: Tensor, t, spec: SinusoidalSpec) -> Tensor:
        offset = self.channel_offset(t, spec)
        if offset is not None:
            z = add_channel_offset(z, offset)
        pos = self.positional(t, (z.shape[2], z.shape[3]), spec)
        if pos is not None:
            z = add_positional_offset(z, pos)
        return z


@dataclass
class Block:
    cfg: BlockConfig
    conv_w: list[Tensor]
    conv_b: list[Tensor | None]
    time_w: list[Tensor]  # node_concat_conv only: (C, 1, k, k) time-channel slices
    gammas: list[Tensor]
    betas: list[Tensor]
    insertions: list[Insertion]
    sin_spec: SinusoidalSpec = field(default_factory=SinusoidalSpec)

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, w in enumerate(self.conv_w):
            out[f"conv{i + 1}.weight"] = w
            if self.conv_b[i] is not None:
                out[f"conv{i + 1}.bias"] = self.conv_b[i]
        for i, w in enumerate(self.time_w):
            out[f"conv{i + 1}.time_weight"] = w
        for i, (g, b) in enumerate(zip(self.gammas, self.betas)):
            out[f"norm{i + 1}.gamma"] = g
            out[f"norm{i + 1}.beta"] = b
        for i, ins in enumerate(self.insertions):
            out.update(ins.named(f"emb{i + 1}"))
        return out

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {"conv": [], "norm": [], "embed": []}
        for name in self.named_parameters():
            if name.startswith("emb") or name.endswith("time_weight"):
                groups["embed"].append(name)
            elif name.startswith("norm"):
                groups["norm"].append(name)
            else:
                groups["conv"].append(name)
        return groups

    def embedding_parameters(self) -> list[Tensor]:
        named = self.named_parameters()
        return [named[n] for n in self.parameter_groups()["embed"]]

    def state(self) -> dict[str, np.ndarray]:
        return {k: np.array(v.data) for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            arr = np.array(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"state for {name} has shape {arr.shape}, expected {p.shape}")
            arr.flags.writeable = False
            p.data = arr

    # ------------------------------------------------------------ forward

    @property
    def _norm_spec(self):
        return self.cfg.norm.spec()

    def _norm_act(self, x: Tensor, i: int) -> Tensor:
        return activation(normalize(x, self._norm_spec, self.gammas[i], self.betas[i]), self.cfg.activation)

    def _conv(self, x: Tensor, t, i: int) -> Tensor:
        if self.cfg.pipeline is Pipeline.NODE_CONCAT_CONV:
            kernel = concat([self.conv_w[i], self.time_w[i]], axis=1)
            z = concat_conv(x, t, ConcatConvParams(kernel, self.conv_b[i], self.cfg.padding))
            return self.insertions[i].apply(z, t, self.sin_spec)
        z = conv2d(x, self.conv_w[i], self.conv_b[i], self.cfg.padding)
        if i < len(self.insertions):
            z = self.insertions[i].apply(z, t, self.sin_spec)
        return z

    def forward(self, x, t) -> Tensor:
        x = as_tensor(x)
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.channels:
            raise ConfigError(f"block expects (N, {cfg.channels}, H, W) input, got {x.shape}")
        tv = np.asarray(t, dtype=np.float64)
        if tv.ndim not in (0, 1) or (tv.ndim == 1 and tv.shape[0] != x.shape[0]):
            raise ConfigError(f"time must be a scalar or have one entry per sample, got shape {tv.shape}")
        h = self._conv(self._norm_act(x, 0), t, 0)
        h = self._conv(self._norm_act(h, 1), t, 1)
        if cfg.pipeline is Pipeline.DDPM:
            crop = (x.shape[2] - h.shape[2]) // 2
            skip = x if crop == 0 else x[:, :, crop:-crop, crop:-crop]
            return skip + h
        return normalize(h, self._norm_spec, self.gammas[2], self.betas[2])

    __call__ = forward

    # ------------------------------------------------------------ variants

    def with_operand_scale(self, scale: float) -> Block:
        """Copy whose operand conv kernels are multiplied by ``scale``."""
        out = self.copy()
        for w in out.conv_w:
            w.data = _frozen(w.data * scale)
        return out

    def copy(self) -> Block:
        clone = build_block(self.cfg)
        clone.load_state(self.state())
        return clone


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def _param(arr, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


def build_block(cfg: BlockConfig | dict, rng: np.random.Generator | None = None) -> Block:
    """Instantiate parameters for ``cfg``; draws come from ``rng`` or ``cfg.seed``."""
    if isinstance(cfg, dict):
        cfg = block_config(**cfg)
    if rng is None:
        rng = np.random.default_rng(0 if cfg.seed is None else cfg.seed)
    c, k = cfg.channels, cfg.kernel_size
    concat_pipe = cfg.pipeline is Pipeline.NODE_CONCAT_CONV
    fan_in = (c + 1) * k * k if concat_pipe else c * k * k
    kaiming = math.sqrt(6.0 / fan_in)
    time_fan = (c + 1) * k * k
    time_bound = math.sqrt(6.0 / time_fan)

    conv_w, conv_b, time_w = [], [], []
    for i in range(2):
        if cfg.weight_std is None:
            w = rng.uniform(-kaiming, kaiming, size=(c, c, k, k))
        else:
            half = math.sqrt(3.0) * cfg.weight_std
            w = rng.uniform(-half, half, size=(c, c, k, k))
        conv_w.append(_param(w, f"conv{i + 1}.weight"))
        if concat_pipe:
            time_w.append(_param(rng.uniform(-kaiming, kaiming, size=(c, 1, k, k)), f"conv{i + 1}.time_weight"))
        bias_bound = 1.0 / math.sqrt(fan_in)
        b = rng.uniform(-bias_bound, bias_bound, size=c)
        if cfg.bias_policy.conv_bias is BiasInit.ZERO:
            b = np.zeros(c)
        conv_b.append(_param(b, f"conv{i + 1}.bias"))

    n_norms = 2 if cfg.pipeline is Pipeline.DDPM else 3
    gammas = [_param(np.ones(c), f"norm{i + 1}.gamma") for i in range(n_norms)]
    betas = [_param(np.zeros(c), f"norm{i + 1}.beta") for i in range(n_norms)]

    sin_spec = SinusoidalSpec(cfg.sinusoidal_dim)
    hidden = cfg.hidden_width
    default_embed_bias = cfg.bias_policy.embed_bias is BiasInit.DEFAULT
    n_insert = 1 if cfg.pipeline is Pipeline.DDPM else 2
    shrink = 0 if cfg.padding is Padding.SAME_ZERO else k - 1
    insertions = []
    for i in range(n_insert):
        hi, wi = cfg.height - (i + 1) * shrink, cfg.width - (i + 1) * shrink
        ins = Insertion()
        if not concat_pipe:
            if cfg.embedding is EmbeddingKind.LINEAR:
                # same law as the spatial sum of a ConcatConv time slice
                ins.v = _param(rng.uniform(-time_bound, time_bound, size=(c, k, k)).sum(axis=(1, 2)), "v")
            else:
                ins.mlp = init_mlp_branch(rng, cfg.sinusoidal_dim, hidden, c, cfg.activation, default_embed_bias)
        if cfg.positional is EmbeddingKind.LINEAR:
            ins.pos_p = _param(rng.uniform(-1.0, 1.0, size=(hi, wi)), "p")
        elif cfg.positional is EmbeddingKind.SINUSOIDAL_MLP:
            ins.pos_mlp = init_mlp_branch(
                rng, cfg.sinusoidal_dim, hidden, hi * wi, cfg.activation, default_embed_bias
            )
        insertions.append(ins)

    return Block(cfg, conv_w, conv_b, time_w, gammas, betas, insertions, sin_spec)


def concat_to_additive(block: Block) -> Block:
    """Map a ConcatConv block onto the equivalent additive-embedding block.

    Exact for valid padding: each time slice collapses to its spatial sum.
    """
    if block.cfg.pipeline is not Pipeline.NODE_CONCAT_CONV:
        raise ConfigError("concat_to_additive needs a node_concat_conv block")
    cfg = block.cfg.model_copy(update={"pipeline": Pipeline.NODE_ADDITIVE, "embedding": EmbeddingKind.LINEAR})
    out = build_block(cfg)
    state = {k: v for k, v in block.state().items() if not k.endswith("time_weight")}
    for i, tw in enumerate(block.time_w):
        state[f"emb{i + 1}.v"] = tw.data[:, 0].sum(axis=(1, 2))
    for name, p in out.named_parameters().items():
        if name not in state:
            state[name] = p.data
    out.load_state(state)
    return out
