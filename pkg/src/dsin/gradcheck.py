"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


class NumericError(ArithmeticError):
    pass


def _scalar(value: Tensor) -> float:
    v = float(np.asarray(value.data).reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError(f"non-finite function value {v}")
    return v


def numeric_gradient(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> list:
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat, gflat = p.data.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = _scalar(f())
            flat[k] = orig - eps
            down = _scalar(f())
            flat[k] = orig
            gflat[k] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def analytic_gradient(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list:
    for p in params:
        p.grad = None
    out = f()
    _scalar(out)
    backward(out)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` must rebuild its graph from the current values of ``params`` on
    every call; each coordinate is perturbed in place by ``±eps``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    analytic = analytic_gradient(f, params)
    numeric = numeric_gradient(f, params, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        err = np.abs(a - n) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
