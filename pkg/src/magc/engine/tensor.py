"""Reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray plus an optional gradient buffer. Ops (see ops.py)
link outputs to their parents with a backward closure; backward() walks that
implicit tape in reverse topological order exactly once. Dropping the loss
tensor releases every saved activation, so there is no explicit tape object
to clear.

Accumulation order is fixed by construction (sequential numpy reductions,
deterministic DFS), which the coding path relies on for bit-identical reruns.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import NonFiniteError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


def _check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    # Cheap single-pass probe: NaN/Inf poison the sum. Fall back to the
    # exact scan only when the probe trips (cancellation cannot unpoison).
    s = float(arr.sum()) if arr.size else 0.0
    if not math.isfinite(s):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """N-dimensional float array with optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None,
                 check: bool = True):
        arr = np.asarray(data)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if check:
            _check_finite(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents if requires_grad else ()
        self._backward = backward if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, check=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor through the recorded graph."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        # Iterative post-order DFS; each node visited once.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.accumulate_grad(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))
