"""Minimal tape-free reverse-mode differentiation over dense matrices.

Each :class:`Var` keeps its parents and a closure mapping the upstream
gradient to one gradient per parent.  :func:`backward` walks the graph in
reverse topological order.  Only the handful of primitives the GCN needs are
provided; forward values come from :mod:`regiongraph.linalg`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from regiongraph import linalg

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents: Sequence["Var"] = (), backward_fn: BackwardFn | None = None,
                 requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape}, requires_grad={self.requires_grad})"


def param(value, name: str = "") -> Var:
    return Var(value, requires_grad=True, name=name)


def const(value) -> Var:
    return value if isinstance(value, Var) else Var(value)


def _node(value, parents, backward_fn) -> Var:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Var(value)
    return Var(value, parents, backward_fn)


def backward(root: Var, seed: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(v) into ``v.grad`` for every parameter below root."""
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        v, expanded = stack.pop()
        if expanded:
            order.append(v)
            continue
        if id(v) in seen or not v.requires_grad:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v.parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value) if seed is None else np.asarray(seed)}
    for v in reversed(order):
        g = grads.pop(id(v), None)
        if g is None:
            continue
        if v.backward_fn is None:
            v.grad = g if v.grad is None else v.grad + g
            continue
        for p, pg in zip(v.parents, v.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    # skip the product for a side that needs no gradient (graphs, inputs)
    return _node(linalg.matmul(av, bv), (a, b),
                 lambda g: (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None))


def transpose(a: Var) -> Var:
    return _node(a.value.T, (a,), lambda g: (g.T,))


def add(*xs: Var) -> Var:
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise linalg.ShapeError("add", shape, x.shape)
    value = xs[0].value
    for x in xs[1:]:
        value = value + x.value
    return _node(value, xs, lambda g: (g,) * len(xs))


def add_bias(x: Var, b: Var) -> Var:
    """Add a length-k vector to every row of an n x k matrix."""
    if x.value.ndim != 2 or b.shape != (x.shape[1],):
        raise linalg.ShapeError("add_bias", x.shape, b.shape)
    return _node(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)))


def mul_const(x: Var, c: np.ndarray) -> Var:
    return _node(x.value * c, (x,), lambda g: (g * c,))


def relu(x: Var) -> Var:
    mask = x.value > 0
    return _node(linalg.relu(x.value), (x,), lambda g: (g * mask,))


def softmax_rows(x: Var) -> Var:
    y = linalg.softmax_rows(x.value)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _node(y, (x,), back)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = linalg.LAYER_NORM_EPS) -> Var:
    xv = x.value
    d = xv.shape[1]
    mu = xv.mean(axis=1, keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    if eps == 0.0:
        raise ValueError("differentiable layer_norm requires eps > 0")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    value = linalg.layer_norm(xv, gain.value, bias.value, eps)

    def back(g):
        dxhat = g * gain.value
        dx = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True) / d)
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node(value, (x, gain, bias), back)


def mean_rows(x: Var) -> Var:
    """Mean over rows as a 1 x d matrix."""
    n = x.shape[0]
    value = linalg.mean_rows(x.value)[None, :]
    return _node(value, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def concat_cols(a: Var, b: Var) -> Var:
    if a.shape[0] != b.shape[0]:
        raise linalg.ShapeError("concat_cols", a.shape, b.shape)
    k = a.shape[1]
    return _node(np.concatenate([a.value, b.value], axis=1), (a, b),
                 lambda g: (g[:, :k], g[:, k:]))
