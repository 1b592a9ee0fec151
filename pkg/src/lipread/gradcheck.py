"""Central finite-difference checks for the analytic gradients (run in float64)."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_gradient(f, param: Tensor, h=1e-4):
    """d f() / d param by central differences; ``f`` returns a scalar float."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(build, params, seed=0, h=1e-4):
    """Worst relative error over ``params`` of a random projection of ``build()``.

    ``build`` constructs the output tensor from the current parameter values.
    A fixed random weighting turns the output into a scalar, so every output
    element contributes to the check.
    """
    out = build()
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    for p in params:
        p.grad = None
    out.backward(weights)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def scalar():
        return float((build().data * weights).sum())

    return max(relative_error(a, numerical_gradient(scalar, p, h)) for a, p in zip(analytic, params))
