"""Dense float64 tensors with reverse-mode automatic differentiation.

Image batches are laid out batch x height x width x channels, row-major.
Every forward primitive in :mod:`cbamnet.ops` returns a new ``Tensor`` that
remembers its inputs and a backward closure; calling :func:`backward` on a
scalar result walks the graph in reverse topological order and accumulates
gradients additively, so values consumed more than once (dense connectivity
reuses block inputs) receive the sum of their downstream gradients.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """A dense multi-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_inputs", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, _inputs: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._inputs = _inputs
        self._backward: Callable[[np.ndarray], None] | None = None
        self._grad_owned = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def clear_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def make_node(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    """Wrap an op result; the backward closure is kept only if it can matter."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires, _inputs=inputs if requires else ())
    if requires:
        out._backward = backward
    return out


def accumulate_grad(t: Tensor, g: np.ndarray):
    """Add ``g`` into ``t.grad``; fan-out nodes sum contributions.

    The first contribution is stored by reference and the array is never
    mutated until a second contribution arrives, at which point the sum is
    materialized into a fresh owned buffer. Backward closures must therefore
    not mutate an array after passing it here.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.asarray(g, dtype=np.float64)
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def backward(loss: Tensor):
    """Reverse-mode gradients of a scalar node through its graph.

    Frozen parameters (``requires_grad`` False) are never visited, so they
    receive no gradient and subgraphs feeding only frozen values are skipped.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    # Iterative post-order: graphs for deep backbones overflow recursion.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for inp in node._inputs:
            if inp.requires_grad and id(inp) not in visited:
                stack.append((inp, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


class ParameterSet:
    """Ordered map of unique parameter names to tensors with freeze flags.

    Iteration order is insertion order, stable across runs given identical
    construction; checkpoints and optimizers rely on this.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._frozen[name] = False
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def set_frozen(self, name: str, frozen: bool):
        if name not in self._params:
            raise KeyError(name)
        self._frozen[name] = bool(frozen)
        self._params[name].requires_grad = not frozen

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def trainable_items(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._params.items() if not self._frozen[n])

    def clear_grads(self):
        for t in self._params.values():
            t.grad = None

    def total_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def trainable_count(self) -> int:
        return sum(t.size for n, t in self.trainable_items())


def finite_diff_grad(
    f: Callable[[Iterable[Tensor]], float],
    params: list[Tensor],
    eps: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference numeric gradient of ``f`` at the current parameters.

    ``f(params)`` must rebuild its computation from the tensors' current data;
    coordinates are perturbed in place and restored. Used as the independent
    oracle for every analytic backward pass, always in 64-bit.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + eps
            f_plus = float(f(params))
            p.data[idx] = orig - eps
            f_minus = float(f(params))
            p.data[idx] = orig
            g[idx] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g)
    return grads
