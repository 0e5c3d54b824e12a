"""Dense float64 tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to parent gradients.  Broadcasting is
limited to a trailing-vector operand (the bias case); anything else must be
reshaped explicitly.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _sum_to_trailing(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape[-b.data.ndim:] != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not compatible")
    bshape = b.shape

    def back(g):
        return g, _sum_to_trailing(g, bshape)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def row_scale(x, w) -> Tensor:
    """Multiply each trailing vector of ``x`` by the matching scalar in ``w``.

    ``w`` has shape ``x.shape[:-1]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.shape != x.shape[:-1]:
        raise ShapeError(f"row_scale: weight shape {w.shape} != {x.shape[:-1]}")
    xd, wd = x.data, w.data

    def back(g):
        return g * wd[..., None], (g * xd).sum(axis=-1)

    return _make(xd * wd[..., None], (x, w), back, "row_scale")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sin(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.sin(xd), (x,), lambda g: (g * np.cos(xd),), "sin")


def cos(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),), "cos")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


# ---------------------------------------------------------------- reductions

def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _make(np.array([x.data.sum()]), (x,),
                     lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),), "sum")
    ax = axis % x.data.ndim

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _make(x.data.sum(axis=ax), (x,), back, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / count)


def max_pool(x, axis: int) -> Tensor:
    """Max over ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    ax = axis % x.data.ndim
    idx = np.argmax(x.data, axis=ax)
    out = np.take_along_axis(x.data, np.expand_dims(idx, ax), axis=ax).squeeze(ax)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _make(out, (x,), back, "max_pool")


# ---------------------------------------------------------------- structural

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].data.ndim
    for x in xs[1:]:
        if x.data.ndim != xs[0].data.ndim or any(
            x.shape[i] != xs[0].shape[i] for i in range(x.data.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, back, "concat")


def take_last(x, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop]``."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        gx[..., start:stop] = g
        return (gx,)

    return _make(x.data[..., start:stop].copy(), (x,), back, "take_last")


# ---------------------------------------------------------------- layers

def linear(x, weight, bias=None) -> Tensor:
    """``y = x @ W + b`` over any number of leading batch dimensions."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input last dim {x.shape[-1]} does not match weight {weight.shape}"
        )
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data
    y = xd @ wd
    if bias is not None:
        y = y + bias.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        return (gx, gw) + ((g2.sum(axis=0),) if bias is not None else ())

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, back, "linear")


def softmax(x) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax: non-finite logits")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def mse(pred, target) -> Tensor:
    d = sub(pred, target)
    return mean(mul(d, d))


# ---------------------------------------------------------------- backward

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward called on a tensor with no recorded graph")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("backward: loss is not finite")
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
