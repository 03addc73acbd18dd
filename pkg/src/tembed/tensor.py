"""Dense float64 tensors with a define-by-run reverse-mode tape.

Feature maps are rank-4 ``(N, C, H, W)``; the same ``Tensor`` type also carries
the vectors and matrices of the embedding MLPs.  Every primitive records a node
when at least one input requires a gradient, and ``backward`` replays those
nodes in reverse topological order.
"""

from __future__ import annotations

import enum
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericalError

__all__ = [
    "ActivationKind",
    "Padding",
    "Tape",
    "Tensor",
    "activation",
    "as_tensor",
    "backward",
    "concat",
    "concat_channels",
    "conv2d",
    "finite_diff_grad",
    "mean",
    "tsum",
]


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    SILU = "silu"
    ELU = "elu"
    SOFTPLUS = "softplus"
    SIGMOID = "sigmoid"
    SWISH = "swish"  # SiLU with beta fixed to 1


class Padding(str, enum.Enum):
    VALID = "valid"
    SAME_ZERO = "same_zero"


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Immutable array value, optionally tracked for reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to the reflected Tensor method

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._parents = ()
        out._backward = None
        out._op = "leaf"
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {op}")
    out = Tensor._wrap(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    return _make(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1.0),),
        "pow",
    )


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., n) and ``b`` a matrix (n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ConfigError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _bw(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, b.shape[0]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), _bw, "matmul")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), _bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    def _bw(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _make(np.array(a.data[index]), (a,), _bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _bw, "concat")


def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    """Concatenate along axis 1; ``x``'s channels come first."""
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 4 or y.ndim != 4:
        raise ConfigError("concat_channels expects rank-4 tensors")
    if (x.shape[0], x.shape[2], x.shape[3]) != (y.shape[0], y.shape[2], y.shape[3]):
        raise ConfigError(f"concat_channels: batch/spatial mismatch {x.shape} vs {y.shape}")
    return concat([x, y], axis=1)


def conv2d(x, kernel, bias=None, padding: Padding | str = Padding.SAME_ZERO) -> Tensor:
    """Stride-1 cross-correlation of ``x`` (N, C, H, W) with ``kernel`` (Co, C, k, k)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    padding = Padding(padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigError("conv2d expects rank-4 input and kernel")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = kernel.shape
    if c_in != c:
        raise ConfigError(f"conv2d: kernel expects {c_in} input channels, got {c}")
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    k = kh
    pad = (k - 1) // 2 if padding is Padding.SAME_ZERO else 0
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ConfigError(f"conv2d: input {h}x{w} too small for {k}x{k} kernel with {padding.value} padding")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, Ho, Wo, k, k)
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ConfigError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    ho, wo = out.shape[2], out.shape[3]

    def _bw(g):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di : di + ho, dj : dj + wo] += np.einsum("nohw,oc->nchw", g, kernel.data[:, :, di, dj])
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(np.ascontiguousarray(out), tuple(parents), _bw, "conv2d")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activation(x, kind: ActivationKind | str) -> Tensor:
    x = as_tensor(x)
    kind = ActivationKind(kind)
    d = x.data
    if kind is ActivationKind.RELU:
        y, dy = np.where(d > 0, d, 0.0), (d > 0).astype(np.float64)
    elif kind in (ActivationKind.SILU, ActivationKind.SWISH):
        s = _sigmoid(d)
        y, dy = d * s, s * (1.0 + d * (1.0 - s))
    elif kind is ActivationKind.ELU:
        y = np.where(d > 0, d, np.expm1(np.minimum(d, 0.0)))
        dy = np.where(d > 0, 1.0, np.exp(np.minimum(d, 0.0)))
    elif kind is ActivationKind.SOFTPLUS:
        y, dy = np.logaddexp(0.0, d), _sigmoid(d)
    else:
        y = _sigmoid(d)
        dy = y * (1.0 - y)
    return _make(y, (x,), lambda g: (g * dy,), kind.value)


# ---------------------------------------------------------------- tape


class Tape:
    """Topologically ordered record of the nodes that produced ``loss``.

    Built per forward pass by walking parent links from the loss; the list
    order is creation-consistent, so reversed iteration visits every node
    after all of its consumers.
    """

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.nodes: list[Tensor] = self._toposort(loss)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def backward(self, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Accumulate gradients; returns ``{id(leaf): grad}`` and sets ``leaf.grad``."""
        grads: dict[int, np.ndarray] = {
            id(self.loss): np.ones(self.loss.shape) if seed is None else np.asarray(seed, dtype=np.float64)
        }
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node.is_leaf:
                continue
            del grads[id(node)]
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)
        for leaf in self.leaves:
            leaf.grad = grads.get(id(leaf), np.zeros(leaf.shape))
        return grads


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray] | dict[int, np.ndarray]:
    """Reverse-mode gradient of a scalar ``loss``.

    With ``wrt`` given, returns one gradient per tensor in that order; tensors
    that do not reach the loss get an exact zero array.
    """
    loss = as_tensor(loss)
    if loss.data.size != 1 or loss.ndim > 1:
        raise ConfigError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        grads: dict[int, np.ndarray] = {}
    else:
        grads = Tape(loss).backward()
    if wrt is None:
        return grads
    out = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros(t.shape)
            t.grad = g
        out.append(g)
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta`` (any shape)."""
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat, gflat = theta.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(theta.copy()))
        flat[i] = orig - h
        fm = float(f(theta.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
