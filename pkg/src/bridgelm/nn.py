"""Parameter containers and the handful of layers the bridge and decoder share."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    """Walks attributes in definition order to find parameters and submodules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if strict and missing:
            raise KeyError(f"checkpoint is missing parameters: {sorted(missing)[:5]}")
        for k, arr in state.items():
            if k not in own:
                if strict:
                    raise KeyError(f"unexpected parameter {k!r}")
                continue
            if own[k].shape != tuple(arr.shape):
                raise T.ShapeError(f"{k}: checkpoint shape {arr.shape} != model {own[k].shape}")
            own[k].data[...] = arr


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True, std: float = 0.02):
        self.weight = param(rng, (d_in, d_out), std)
        self.bias = zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = ones((d,))
        self.beta = zeros((d,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, d: int, mult: int, rng):
        self.up = Linear(d, d * mult, rng)
        self.down = Linear(d * mult, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


class Attention(Module):
    """Multi-head scaled dot-product attention.

    ``allowed`` is an optional [Tq, Tk] boolean mask. The last attention
    weights (heads x Tq x Tk) are kept on ``last_weights`` for inspection.
    """

    def __init__(self, d: int, heads: int, rng):
        if d % heads:
            raise ValueError(f"hidden size {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        n, d = x.shape
        return T.transpose(T.reshape(x, (n, self.heads, d // self.heads)), (1, 0, 2))

    def __call__(self, x: Tensor, context: Tensor | None = None, allowed=None) -> Tensor:
        context = x if context is None else context
        n, d = x.shape
        dh = d // self.heads
        q = self._split(self.q(x))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        scores = T.scale(q @ T.transpose(k, (0, 2, 1)), 1.0 / math.sqrt(dh))
        w = T.softmax_rows(scores, allowed)
        self.last_weights = w.data
        mixed = T.reshape(T.transpose(w @ v, (1, 0, 2)), (n, d))
        return self.out(mixed)
