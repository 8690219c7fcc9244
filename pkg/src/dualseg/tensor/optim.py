"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from .core import Tensor


@dataclass
class AdamState:
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
) -> None:
    """Apply one Adam update in place.

    ``params`` and ``grads`` are keyed by parameter name; names whose gradient
    is ``None`` are skipped (their moments are left untouched).  A non-finite
    gradient aborts the whole step before any parameter is modified.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}; step aborted")

    b1, b2 = state.betas
    state.t += 1
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


class Adam:
    """Thin stateful wrapper over :func:`adam_step` for a named parameter set."""

    def __init__(self, params: Dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(betas=tuple(betas), eps=eps)

    def step(self, lr: float, names: Optional[Iterable[str]] = None) -> None:
        keys: Sequence[str] = list(self.params) if names is None else list(names)
        grads = {k: self.params[k].grad for k in keys}
        adam_step(self.params, grads, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
