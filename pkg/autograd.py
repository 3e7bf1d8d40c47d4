"""Minimal reverse-mode differentiation over float64 numpy arrays.

Every op builds a ``Tensor`` that remembers its parents and a closure that
pushes the incoming gradient back to them. ``Tensor.backward`` walks the graph
in reverse topological order. Only nodes with ``requires_grad`` take part.
"""

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        value: np.ndarray,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        name: Optional[str] = None,
    ) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.value.shape)

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def backward(self) -> None:
        """Backpropagate from a scalar (1-element) tensor."""
        if self.value.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.value.shape}")
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self.accumulate(np.ones_like(self.value))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(value: np.ndarray) -> Tensor:
    return Tensor(value, requires_grad=False)


def parameter(value: np.ndarray, name: Optional[str] = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _node(value: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, parents=tuple(parents), backward=backward if needs else None)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a.accumulate(g @ b.value.T)
        b.accumulate(a.value.T @ g)
    return _node(a.value @ b.value, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))
    return _node(a.value + b.value, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(-_unbroadcast(g, b.shape))
    return _node(a.value - b.value, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a.accumulate(_unbroadcast(g * b.value, a.shape))
        b.accumulate(_unbroadcast(g * a.value, b.shape))
    return _node(a.value * b.value, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a.accumulate(g * factor)
    return _node(a.value * factor, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def backward(g: np.ndarray) -> None:
        a.accumulate(g * (1.0 - out * out))
    return _node(out, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a.accumulate(g * np.sign(a.value))
    return _node(np.abs(a.value), (a,), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a.accumulate(g.T)
    return _node(a.value.T, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        a.accumulate(out * (g - np.sum(g * out, axis=1, keepdims=True)))
    return _node(out, (a,), backward)


def log_softmax_rows(a: Tensor) -> Tensor:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - log_z
    probs = np.exp(out)

    def backward(g: np.ndarray) -> None:
        a.accumulate(g - probs * g.sum(axis=1, keepdims=True))
    return _node(out, (a,), backward)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Unit-norm rows; zero rows pass through as zeros with zero gradient."""
    norms = np.linalg.norm(a.value, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    out = a.value / safe

    def backward(g: np.ndarray) -> None:
        dot = np.sum(g * out, axis=1, keepdims=True)
        grad = (g - out * dot) / safe
        a.accumulate(np.where(norms == 0.0, 0.0, grad))
    return _node(out, (a,), backward)


def slice_cols(a: Tensor, stop: int) -> Tensor:
    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.value)
        full[:, :stop] = g
        a.accumulate(full)
    return _node(a.value[:, :stop], (a,), backward)


def slice_rows(a: Tensor, start: int, stop: Optional[int] = None) -> Tensor:
    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.value)
        full[start:stop] = g
        a.accumulate(full)
    return _node(a.value[start:stop], (a,), backward)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows by index (embedding lookup); repeated indices accumulate."""
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.value)
        np.add.at(full, indices, g)
        a.accumulate(full)
    return _node(a.value[indices], (a,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.value.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for part, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            part.accumulate(g[lo:hi])
    return _node(np.concatenate([p.value for p in parts], axis=0), parts, backward)


def diagonal(a: Tensor) -> Tensor:
    """Diagonal of a square matrix as an (n, 1) column."""
    n = a.value.shape[0]

    def backward(g: np.ndarray) -> None:
        a.accumulate(np.diag(g[:, 0]))
    return _node(np.diag(a.value).reshape(n, 1).copy(), (a,), backward)


def sum_rows(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a.accumulate(np.broadcast_to(g, a.value.shape).copy())
    return _node(a.value.sum(axis=1, keepdims=True), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a.accumulate(np.full_like(a.value, float(g.reshape(-1)[0])))
    return _node(np.array([[a.value.sum()]]), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    count = a.value.size

    def backward(g: np.ndarray) -> None:
        a.accumulate(np.full_like(a.value, float(g.reshape(-1)[0]) / count))
    return _node(np.array([[a.value.mean()]]), (a,), backward)
