"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_record, recording

# |a - n| / max(|a|, |n|, FLOOR): relative for ordinary magnitudes, absolute near zero
FLOOR = 1e-3


def numeric_grad(loss_fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    g = grad.reshape(-1)
    with no_record():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().data)
            flat[i] = orig - step
            down = float(loss_fn().data)
            flat[i] = orig
            g[i] = (up - down) / (2.0 * step)
    return grad


def analytic_grad(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with recording() as tape:
        loss = loss_fn()
    backward(tape, loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def max_gradient_error(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    analytic = analytic_grad(loss_fn, tensors)
    return max(relative_error(a, numeric_grad(loss_fn, t, step)) for a, t in zip(analytic, tensors))


def sampled_gradient_error(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], per_tensor: int,
                           rng: np.random.Generator, step: float = 1e-5) -> float:
    """Like ``max_gradient_error`` but probes only ``per_tensor`` random coordinates of each tensor.

    For models too large to difference exhaustively.
    """
    analytic = analytic_grad(loss_fn, tensors)
    worst = 0.0
    with no_record():
        for a, t in zip(analytic, tensors):
            flat = t.data.reshape(-1)
            idx = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                up = float(loss_fn().data)
                flat[i] = orig - step
                down = float(loss_fn().data)
                flat[i] = orig
                num[j] = (up - down) / (2.0 * step)
            worst = max(worst, relative_error(a.reshape(-1)[idx], num))
    return worst
