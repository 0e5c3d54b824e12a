"""Parameter containers and the standard layers built on :mod:`tensor`."""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu, "identity": lambda x: x}


class Module:
    """Attribute-registered parameter tree.

    Trainable tensors and sub-modules assigned as attributes (or held in
    lists) are discovered in assignment order, which fixes checkpoint naming.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


def uniform_init(rng: np.random.Generator, fan_in: int, shape: Sequence[int]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(uniform_init(rng, d_in, (d_in, d_out)), requires_grad=True)
        self.bias = Tensor(uniform_init(rng, d_in, (d_out,)), requires_grad=True) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class MLP(Module):
    """Stack of linear layers with an activation between them (none after the last)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, activation: str = "tanh"):
        if len(sizes) < 2:
            raise ValueError(f"MLP needs at least input and output sizes, got {list(sizes)}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.activation = activation
        self.sizes = list(sizes)

    def __call__(self, x) -> Tensor:
        return mlp_forward(x, self.layers, self.activation)


def mlp_forward(x, layers: Sequence[Linear], activation: str = "tanh") -> Tensor:
    if not layers:
        raise ValueError("mlp_forward: empty layer list")
    act = ACTIVATIONS[activation]
    h = x
    for i, layer in enumerate(layers):
        h = layer(h)
        if i < len(layers) - 1:
            h = act(h)
    return h
