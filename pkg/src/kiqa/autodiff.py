"""Tape-based reverse-mode differentiation over numpy float64 arrays.

Small by design: enough operations for an attention block, layer norm and
the scoring heads, with exact 64-bit gradients that finite-difference
checks can certify.  Tensors wrap ndarrays; operations on tensors that
require gradients record a backward closure, and ``backward()`` replays
the tape in reverse topological order.

Broadcasting follows numpy; gradients of broadcast operands are summed
back down to the operand's shape.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    # -- plumbing -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Backpropagate from this tensor (gradient seeded with ones)."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __getitem__(self, key):
        return take(self, key)

    # -- method sugar -------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def swap_last_axes(self):
        return swap_last_axes(self)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
    return out


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data + b.data, (a, b))
    if out.requires_grad:
        def backward(grad):
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(grad, b.data.shape))
        out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data - b.data, (a, b))
    if out.requires_grad:
        def backward(grad):
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-grad, b.data.shape))
        out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data * b.data, (a, b))
    if out.requires_grad:
        def backward(grad):
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(grad * a.data, b.data.shape))
        out._backward = backward
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data / b.data, (a, b))
    if out.requires_grad:
        def backward(grad):
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-grad * a.data / (b.data * b.data), b.data.shape))
        out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes."""
    out = _node(a.data @ b.data, (a, b))
    if out.requires_grad:
        def backward(grad):
            if a.requires_grad:
                ga = grad @ b.data.swapaxes(-1, -2)
                a._accumulate(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = a.data.swapaxes(-1, -2) @ grad
                b._accumulate(_unbroadcast(gb, b.data.shape))
        out._backward = backward
    return out


def pow_const(a: Tensor, exponent: float) -> Tensor:
    out = _node(a.data**exponent, (a,))
    if out.requires_grad:
        def backward(grad):
            a._accumulate(grad * exponent * a.data ** (exponent - 1))
        out._backward = backward
    return out


def exp(a: Tensor) -> Tensor:
    value = np.exp(a.data)
    out = _node(value, (a,))
    if out.requires_grad:
        def backward(grad):
            a._accumulate(grad * value)
        out._backward = backward
    return out


def log(a: Tensor) -> Tensor:
    out = _node(np.log(a.data), (a,))
    if out.requires_grad:
        def backward(grad):
            a._accumulate(grad / a.data)
        out._backward = backward
    return out


def tanh(a: Tensor) -> Tensor:
    value = np.tanh(a.data)
    out = _node(value, (a,))
    if out.requires_grad:
        def backward(grad):
            a._accumulate(grad * (1.0 - value * value))
        out._backward = backward
    return out


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        def backward(grad):
            g = grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        out._backward = backward
    return out


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )
    out = _node(a.data.mean(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        def backward(grad):
            g = grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape) / count)
        out._backward = backward
    return out


def tmax(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Maximum reduction; the gradient routes to the FIRST argmax."""
    value = a.data.max(axis=axis, keepdims=keepdims)
    out = _node(value, (a,))
    if out.requires_grad:
        if axis is None:
            mask = np.zeros_like(a.data)
            mask.flat[int(np.argmax(a.data))] = 1.0
        else:
            mask = np.zeros_like(a.data)
            idx = np.argmax(a.data, axis=axis)
            np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)

        def backward(grad):
            g = grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(mask * g)
        out._backward = backward
    return out


def take(a: Tensor, key) -> Tensor:
    """Indexing/gather; duplicate fancy indices accumulate gradients."""
    out = _node(a.data[key], (a,))
    if out.requires_grad:
        def backward(grad):
            full = np.zeros_like(a.data)
            np.add.at(full, key, grad)
            a._accumulate(full)
        out._backward = backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _node(a.data.reshape(shape), (a,))
    if out.requires_grad:
        def backward(grad):
            a._accumulate(grad.reshape(a.data.shape))
        out._backward = backward
    return out


def swap_last_axes(a: Tensor) -> Tensor:
    out = _node(a.data.swapaxes(-1, -2), (a,))
    if out.requires_grad:
        def backward(grad):
            a._accumulate(grad.swapaxes(-1, -2))
        out._backward = backward
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    parents = tuple(tensors)
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), parents)
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(grad):
            moved = np.moveaxis(grad, axis, 0)
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    t._accumulate(np.moveaxis(moved[lo:hi], 0, axis))
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Composites
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    # subtracting the detached max is a constant shift: values and
    # gradients are exact, large logits cannot overflow
    shifted = a - Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a - Tensor(a.data.max(axis=axis, keepdims=True))
    return shifted - log(exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, gold: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``gold`` class ids; logits (B, n)."""
    logp = log_softmax(logits, axis=-1)
    onehot = np.zeros_like(logits.data)
    onehot[np.arange(len(gold)), gold] = 1.0
    return -(logp * Tensor(onehot)).sum() / len(gold)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class SGD:
    """Gradient descent with classical momentum; update order is fixed."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9):
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * p.grad
            p.data += v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
