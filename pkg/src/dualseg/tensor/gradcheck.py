"""Central finite-difference gradient checking (64-bit)."""

from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from .core import Tape, Tensor, backward
from .ops import mul, total


def numerical_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    seed: int = 0,
    step: float = 1e-5,
) -> Dict[int, float]:
    """Compare tape gradients of ``sum(fn(*inputs) * R)`` with finite differences.

    ``R`` is a fixed random weighting so every output element contributes.
    Returns the relative error for each input index that requires a gradient.
    """
    rng = np.random.default_rng(seed)
    probe = fn(*inputs)
    weights = rng.standard_normal(probe.shape) if probe.data.ndim else np.ones(())

    def scalar_loss() -> Tensor:
        out = fn(*inputs)
        return total(mul(out, weights))

    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = scalar_loss()
    backward(tape, loss)

    errors = {}
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(lambda: float(scalar_loss().data), t.data, step)
        errors[i] = rel_error(analytic, numeric)
    return errors
