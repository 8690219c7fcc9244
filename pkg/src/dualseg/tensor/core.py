"""Tensor storage and the reverse-mode tape."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
VERIFY_DTYPE = np.float64


class Tensor:
    """Dense array with an optional gradient buffer.

    Feature maps are ``N x C x H x W``; losses are 0-d.  ``data`` is always a
    contiguous numpy array of float32 (training) or float64 (verification).
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.require(arr, requirements="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside the ``with`` block whose
    inputs require gradients are appended in execution order, which is a
    valid topological order by construction.
    """

    nodes: List[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: List[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as an op result and record it on the active tape if needed."""
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite values in forward output")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape`` in reverse order.

    Populates ``.grad`` on every leaf tensor with ``requires_grad`` that the
    tape reaches (leaves are tensors that are not outputs of a recorded node).
    Returns the same gradients keyed by ``id(tensor)``.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    outputs = {id(n.output) for n in tape.nodes}
    if id(loss) not in outputs:
        raise ValueError("loss tensor was not produced on this tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise RuntimeError(f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in outputs:
                leaves[key] = t

    result = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g.astype(t.dtype, copy=False)
        result[key] = t.grad
    return result
