"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient (and :func:`no_grad` is not active) the output records its parents
and a backward rule, which together form the dynamic compute graph that
:func:`backward` walks in reverse topological order.

Backward rules are module-level functions looked up when an op is called,
so a test can swap one out to check that the gradient oracle notices.
"""

from __future__ import annotations

import contextlib
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

DTYPE = np.float64

_DEBUG = bool(os.environ.get("BRIDGELM_DEBUG"))
_GRAD_ENABLED = True


class ContractError(ValueError):
    """A caller broke an operation's documented precondition."""


class ShapeError(ContractError):
    pass


def set_debug(flag: bool) -> None:
    """Turn the non-finite output assertion on or off."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        if not isinstance(key, slice):
            raise ContractError("only contiguous row slices are supported")
        return slice_rows(self, key.start, key.stop)

    @property
    def T(self):
        return transpose(self, (1, 0))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _DEBUG and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


# ---------------------------------------------------------------------------
# compute graph + backward


@dataclass
class GraphNode:
    op: str
    inputs: tuple[int, ...]
    tensor: Tensor


@dataclass
class ComputeGraph:
    """Topologically ordered records reachable from a root tensor."""

    nodes: list[GraphNode] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        index = {id(t): i for i, t in enumerate(order)}
        nodes = [
            GraphNode(t.op, tuple(index[id(p)] for p in t._parents if id(p) in index), t)
            for t in order
        ]
        return cls(nodes)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    graph = ComputeGraph.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        t = node.tensor
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.is_leaf:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t._backward(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only trailing-dim broadcasting (bias over rows) is supported
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def _check_trailing(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape == b.shape:
        return
    small, big = (a, b) if a.data.ndim <= b.data.ndim else (b, a)
    if big.shape[big.data.ndim - small.data.ndim:] != small.shape:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _add_backward(g, a_shape, b_shape):
    return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "add")
    return _make(
        a.data + b.data, (a, b), lambda g: _add_backward(g, a.shape, b.shape), "add"
    )


def _neg_backward(g):
    return (-g,)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _neg_backward(g), "neg")


def _mul_backward(g, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: _mul_backward(g, a.data, b.data), "mul")


def _scale_backward(g, c):
    return (g * c,)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: _scale_backward(g, c), "scale")


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_backward(g, x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth everywhere, which keeps finite differences honest."""
    x = a.data
    y = 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))
    return _make(y, (a,), lambda g: _gelu_backward(g, x), "gelu")


# ---------------------------------------------------------------------------
# reductions and layout


def _sum_backward(g, shape):
    return (np.broadcast_to(g, shape).copy(),)


def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: _sum_backward(g, a.shape), "sum")


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.size)


def _reshape_backward(g, shape):
    return (g.reshape(shape),)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    return _make(
        np.ascontiguousarray(a.data.reshape(shape)),
        (a,),
        lambda g: _reshape_backward(g, a.shape),
        "reshape",
    )


def _transpose_backward(g, axes):
    return (np.ascontiguousarray(np.transpose(g, np.argsort(axes))),)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    return _make(
        np.ascontiguousarray(np.transpose(a.data, axes)),
        (a,),
        lambda g: _transpose_backward(g, axes),
        "transpose",
    )


def _concat_backward(g, sizes):
    out, start = [], 0
    for n in sizes:
        out.append(g[start:start + n])
        start += n
    return tuple(out)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise ShapeError(f"concat_rows: trailing shapes differ {[q.shape for q in parts]}")
    sizes = [p.shape[0] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=0)
    return _make(data, tuple(parts), lambda g: _concat_backward(g, sizes), "concat")


def _slice_backward(g, shape, start, stop):
    full = np.zeros(shape, dtype=DTYPE)
    full[start:stop] = g
    return (full,)


def slice_rows(a: Tensor, start: int | None, stop: int | None) -> Tensor:
    start, stop, _ = slice(start, stop).indices(a.shape[0])
    return _make(
        a.data[start:stop].copy(),
        (a,),
        lambda g: _slice_backward(g, a.shape, start, stop),
        "slice",
    )


def _take_rows_backward(g, shape, ids):
    full = np.zeros(shape, dtype=DTYPE)
    np.add.at(full, ids, g)
    return (full,)


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Embedding lookup: rows of ``table`` at ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: id out of range for table of {table.shape[0]} rows")
    return _make(
        table.data[ids],
        (table,),
        lambda g: _take_rows_backward(g, table.shape, ids),
        "take_rows",
    )


# ---------------------------------------------------------------------------
# linear algebra


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _matmul_backward(g, a, b):
    return g @ _swap(b), _swap(a) @ g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match exactly."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: _matmul_backward(g, a.data, b.data), "matmul")


# ---------------------------------------------------------------------------
# normalisation / probabilities


def _softmax_backward(g, p):
    return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


def softmax_rows(x: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``allowed`` is an optional boolean array broadcastable to ``x``; entries
    where it is False get probability exactly 0. Each row needs at least one
    allowed entry.
    """
    z = x.data
    if allowed is not None:
        z = np.where(allowed, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return _make(p, (x,), lambda g: _softmax_backward(g, p), "softmax")


def _layer_norm_backward(g, xhat, rstd, gamma):
    d = xhat.shape[-1]
    lead = tuple(range(xhat.ndim - 1))
    dgamma = (g * xhat).sum(axis=lead)
    dbeta = g.sum(axis=lead)
    dxhat = g * gamma
    dx = (rstd / d) * (
        d * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gamma.data + beta.data
    return _make(
        y,
        (x, gamma, beta),
        lambda g: _layer_norm_backward(g, xhat, rstd, gamma.data),
        "layer_norm",
    )


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _cross_entropy_backward(g, p, targets, mask):
    d = p.copy()
    d[np.arange(len(targets)), targets] -= 1.0
    d *= mask[:, None]
    return (g * d,)


def cross_entropy(logits: Tensor, targets: Sequence[int], mask: Sequence[float]) -> Tensor:
    """Masked negative log-likelihood, summed (not averaged) over positions.

    Rows whose mask is 0 contribute exactly zero to both value and gradient.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [T, V] logits, got {logits.shape}")
    T, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=DTYPE)
    if targets.shape != (T,) or mask.shape != (T,):
        raise ShapeError(
            f"cross_entropy: {T} logit rows but {targets.shape[0]} targets / {mask.shape[0]} mask"
        )
    if T and (targets.min() < 0 or targets.max() >= V):
        raise ContractError(f"cross_entropy: target id outside vocabulary of size {V}")
    if not mask.any():
        warnings.warn("cross_entropy called with an all-zero mask; loss is 0", RuntimeWarning)
    logp = log_softmax_np(logits.data)
    picked = logp[np.arange(T), targets]
    value = -np.sum(np.where(mask != 0, mask * picked, 0.0))
    p = np.exp(logp)
    return _make(
        np.asarray(value),
        (logits,),
        lambda g: _cross_entropy_backward(g, p, targets, mask),
        "cross_entropy",
    )


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class FiniteDiffReport:
    eps: float
    floor: float = 1e-8
    f0: float = 0.0
    max_rel_err: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple[int, ...]] = field(default_factory=dict)
    nonfinite: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return not self.nonfinite and self.worst < tol


def rel_err(a, b, floor: float = 1e-8):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def quotient_resolution(f0: float, eps: float) -> float:
    """Absolute granularity of a central difference quotient of a float64 value near ``f0``."""
    return float(np.spacing(max(abs(f0), 1.0))) / eps


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
    floor: float | None = 1e-8,
    noise_mult: float = 1e5,
) -> FiniteDiffReport:
    """Compare autodiff gradients of ``f()`` against central differences.

    ``f`` takes no arguments and must read the current values of ``params``.
    Parameters with ``requires_grad=False`` are skipped and do not appear in
    the report. Relative error is ``|a - n| / max(|a|, |n|, floor)``. With
    ``floor=None`` the floor becomes ``max(1e-8, noise_mult * resolution)``,
    where resolution is the difference-quotient quantum at ``|f|``; below it
    a gradient coordinate is only comparable in absolute terms.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    live = {k: p for k, p in params.items() if p.requires_grad}
    for p in live.values():
        p.zero_grad()
    root = f()
    if root.data.size != 1:
        raise ContractError("finite_diff_check: f must return a scalar")
    root.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in live.items()}
    f0 = root.item()
    if floor is None:
        floor = max(1e-8, noise_mult * quotient_resolution(f0, eps))

    report = FiniteDiffReport(eps=eps, floor=floor, f0=f0)
    with no_grad():
        for name, p in live.items():
            numeric = np.zeros_like(p.data)
            bad = np.zeros(p.shape, dtype=bool)
            for idx in np.ndindex(*p.shape):
                orig = p.data[idx]
                p.data[idx] = orig + eps
                fp = f().item()
                p.data[idx] = orig - eps
                fm = f().item()
                p.data[idx] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    report.nonfinite.append((name, idx))
                    bad[idx] = True
                    continue
                numeric[idx] = (fp - fm) / (2 * eps)
            err = np.where(bad, 0.0, rel_err(analytic[name], numeric, floor))
            if err.size:
                worst = np.unravel_index(int(np.argmax(err)), err.shape)
                report.max_rel_err[name] = float(err[worst])
                report.worst_index[name] = tuple(int(i) for i in worst)
            else:
                report.max_rel_err[name] = 0.0
    return report

