"""Every differentiable op paired with a small scalar probe for gradient checks.

Each builder takes a seeded generator and returns ``(store, f)`` where ``f``
reduces the op's output to a scalar through a fixed random projection, so
every output element contributes to the checked gradient.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .optim import ParameterStore

Builder = Callable[[np.random.Generator], tuple[ParameterStore, Callable[[], T.Tensor]]]


def _probe(out: T.Tensor, proj: np.ndarray) -> T.Tensor:
    return T.tsum(T.mul(out, proj))


def _unary(op, positive: bool = False) -> Builder:
    def build(rng):
        s = ParameterStore()
        x = rng.normal(size=(3, 4))
        if positive:
            x = np.abs(x) + 0.5
        s.add("x", x)
        proj = rng.normal(size=(3, 4))
        return s, lambda: _probe(op(s["x"]), proj)
    return build


def _binary(op, shape_a=(3, 4), shape_b=(3, 4), positive_b=False) -> Builder:
    def build(rng):
        s = ParameterStore()
        s.add("a", rng.normal(size=shape_a))
        b = rng.normal(size=shape_b)
        s.add("b", np.abs(b) + 0.5 if positive_b else b)
        out_shape = np.broadcast_shapes(shape_a, shape_b)
        proj = rng.normal(size=out_shape)
        return s, lambda: _probe(op(s["a"], s["b"]), proj)
    return build


def _matmul(rng):
    s = ParameterStore()
    s.add("a", rng.normal(size=(2, 3, 4)))
    s.add("b", rng.normal(size=(4, 5)))
    proj = rng.normal(size=(2, 3, 5))
    return s, lambda: _probe(T.matmul(s["a"], s["b"]), proj)


def _reshape(rng):
    s = ParameterStore()
    s.add("x", rng.normal(size=(2, 6)))
    proj = rng.normal(size=(3, 4))
    return s, lambda: _probe(T.reshape(s["x"], (3, 4)), proj)


def _transpose(rng):
    s = ParameterStore()
    s.add("x", rng.normal(size=(2, 3, 4)))
    proj = rng.normal(size=(4, 2, 3))
    return s, lambda: _probe(T.transpose(s["x"], (2, 0, 1)), proj)


def _getitem(rng):
    s = ParameterStore()
    s.add("x", rng.normal(size=(5, 4)))
    idx = (np.array([0, 2, 2, 4]), slice(1, 3))
    proj = rng.normal(size=(4, 2))
    return s, lambda: _probe(T.getitem(s["x"], idx), proj)


def _concat(rng):
    s = ParameterStore()
    s.add("a", rng.normal(size=(2, 3)))
    s.add("b", rng.normal(size=(2, 2)))
    proj = rng.normal(size=(2, 5))
    return s, lambda: _probe(T.concat([s["a"], s["b"]], axis=1), proj)


def _sum(rng):
    s = ParameterStore()
    s.add("x", rng.normal(size=(3, 4)))
    proj = rng.normal(size=(3, 1))
    return s, lambda: _probe(T.tsum(s["x"], axis=1, keepdims=True), proj)


def _mean(rng):
    s = ParameterStore()
    s.add("x", rng.normal(size=(3, 4)))
    proj = rng.normal(size=(4,))
    return s, lambda: _probe(T.mean(s["x"], axis=0), proj)


def _embedding(rng):
    s = ParameterStore()
    s.add("w", rng.normal(size=(6, 3)))
    ids = np.array([[0, 5, 5], [2, 0, 1]])
    proj = rng.normal(size=(2, 3, 3))
    return s, lambda: _probe(T.embedding(s["w"], ids), proj)


def _layer_norm(rng):
    s = ParameterStore()
    s.add("x", rng.normal(size=(2, 3, 5)))
    s.add("w", 1.0 + 0.1 * rng.normal(size=(5,)))
    s.add("b", 0.1 * rng.normal(size=(5,)))
    proj = rng.normal(size=(2, 3, 5))
    return s, lambda: _probe(T.layer_norm(s["x"], s["w"], s["b"]), proj)


def _softmax(rng):
    s = ParameterStore()
    s.add("x", rng.normal(size=(3, 5)))
    proj = rng.normal(size=(3, 5))
    return s, lambda: _probe(T.softmax(s["x"]), proj)


def _log_softmax(rng):
    s = ParameterStore()
    s.add("x", rng.normal(size=(3, 5)))
    proj = rng.normal(size=(3, 5))
    return s, lambda: _probe(T.log_softmax(s["x"]), proj)


def _conv1d(rng):
    s = ParameterStore()
    s.add("x", rng.normal(size=(2, 3, 11)))
    s.add("w", rng.normal(size=(4, 3, 5)))
    s.add("b", rng.normal(size=(4,)))
    L_out = T.conv_out_length(11, 5, 2, 2)
    proj = rng.normal(size=(2, 4, L_out))
    return s, lambda: _probe(T.conv1d(s["x"], s["w"], s["b"], stride=2, padding=2), proj)


def _kl(rng):
    s = ParameterStore()
    s.add("logits", rng.normal(size=(2, 4, 6)))
    p = rng.dirichlet(np.ones(6), size=(2, 4))
    mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=float)
    return s, lambda: T.kl_divergence(p, T.log_softmax(s["logits"]), mask)


def _cross_entropy(rng):
    s = ParameterStore()
    s.add("logits", rng.normal(size=(2, 4, 6)))
    targets = rng.integers(0, 6, size=(2, 4))
    mask = np.array([[1, 1, 1, 1], [0, 1, 1, 0]], dtype=float)
    return s, lambda: T.cross_entropy(T.log_softmax(s["logits"]), targets, mask)


OPS: dict[str, Builder] = {
    "add": _binary(T.add, (3, 4), (4,)),
    "sub": _binary(T.sub, (3, 4), (3, 1)),
    "mul": _binary(T.mul, (3, 4), (1, 4)),
    "div": _binary(T.div, (3, 4), (3, 4), positive_b=True),
    "matmul": _matmul,
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "tanh": _unary(T.tanh),
    "gelu": _unary(T.gelu),
    "reshape": _reshape,
    "transpose": _transpose,
    "getitem": _getitem,
    "concat": _concat,
    "sum": _sum,
    "mean": _mean,
    "embedding": _embedding,
    "layer_norm": _layer_norm,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "conv1d": _conv1d,
    "kl_divergence": _kl,
    "cross_entropy": _cross_entropy,
}
