"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .tensor import Rng, Tensor, no_grad


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    if out.size == 1:
        return out.reshape()
    return (out * Tensor(weights, dtype=out.dtype)).sum()


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Worst relative error between analytic and numeric gradients.

    Non-scalar outputs are contracted with fixed random weights so every
    output element takes part. The error for each input is
    ``|analytic - numeric| / (|analytic| + |numeric|)`` in the L2 norm.
    """
    for tensor in inputs:
        tensor.data = np.ascontiguousarray(tensor.data)
        tensor.requires_grad = True
        tensor.grad = None
    with no_grad():
        probe = fn(*inputs)
    weights = Rng(seed).normal(probe.shape, 1.0, dtype=probe.dtype)

    _scalarize(fn(*inputs), weights).backward()

    worst = 0.0
    for tensor in inputs:
        analytic = (
            np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad
        )
        numeric = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            with no_grad():
                upper = _scalarize(fn(*inputs), weights).item()
            flat[i] = original - h
            with no_grad():
                lower = _scalarize(fn(*inputs), weights).item()
            flat[i] = original
            numeric.reshape(-1)[i] = (upper - lower) / (2 * h)
        scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
