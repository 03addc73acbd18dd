"""Autodiff vs central differences over a list of parameter tensors."""

import numpy as np

from tembed.tensor import Tensor, backward, finite_diff_grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check(loss_fn, params: list[Tensor], h: float = 1e-6) -> float:
    """Worst relative error across ``params``; ``loss_fn()`` rebuilds the graph."""
    grads = backward(loss_fn(), params)
    worst = 0.0
    for p, g in zip(params, grads):
        original = p.data

        def f(theta, p=p):
            p.data = theta
            return loss_fn().item()

        numeric = finite_diff_grad(f, original, h)
        p.data = original
        worst = max(worst, relative_error(g, numeric))
    return worst
