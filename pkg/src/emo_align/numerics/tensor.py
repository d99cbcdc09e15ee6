"""Reverse-mode automatic differentiation over numpy arrays.

Every op records a closure that pushes the upstream gradient into its
parents. Graph recording is skipped when no input requires a gradient or
when running inside :func:`no_grad`, which keeps inference cheap.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()  # grad mode is per thread; corpus and judge workers run on threads


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    if not np.all(np.isfinite(g)):
                        raise NonFiniteError(f"non-finite gradient reaching {node!r}")
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

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

_CONST = Tensor(np.zeros(()))  # stand-in parent for plain-number operands


def _operands(a, b):
    """Wrap array operands; plain Python numbers stay weakly typed so float32 stays float32."""
    def one(x):
        if isinstance(x, Tensor):
            return x, x.data
        if isinstance(x, (int, float)):
            return _CONST, float(x)
        t = Tensor(np.asarray(x))
        return t, t.data
    (ta, ad), (tb, bd) = one(a), one(b)
    return ta, tb, ad, bd


def _shape(x) -> tuple[int, ...]:
    return np.shape(x)


def add(a, b) -> Tensor:
    a, b, ad, bd = _operands(a, b)
    sa, sb = _shape(ad), _shape(bd)

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(ad + bd, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b, ad, bd = _operands(a, b)
    sa, sb = _shape(ad), _shape(bd)

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(ad - bd, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b, ad, bd = _operands(a, b)

    def backward(g):
        return (
            _unbroadcast(g * bd, _shape(ad)) if a.requires_grad else None,
            _unbroadcast(g * ad, _shape(bd)) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b, ad, bd = _operands(a, b)

    def backward(g):
        return (
            _unbroadcast(g / bd, _shape(ad)) if a.requires_grad else None,
            _unbroadcast(-g * ad / (bd * bd), _shape(bd)) if b.requires_grad else None,
        )

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.asarray(ad / bd)
    return _make(_finite(out, "div"), (a, b), backward)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = _finite(np.exp(x.data), "exp")
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _finite(np.log(xd), "log")
    return _make(out, (x,), lambda g: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU; exact identity for large positive inputs."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape / linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul shapes {ad.shape} @ {bd.shape}")
    if bd.ndim == 2 and ad.ndim > 2:
        # [..., K] @ [K, M] as one GEMM over the flattened leading axes
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def backward2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward2)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.outer(ad, g)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        parts = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; backward is a one-hot matmul scatter."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("token id outside the embedding table")
    n_rows = weight.shape[0]

    def backward(g):
        flat = ids.reshape(-1)
        onehot = np.zeros((flat.size, n_rows), dtype=g.dtype)
        onehot[np.arange(flat.size), flat] = 1.0
        return (onehot.T @ g.reshape(flat.size, -1),)

    return _make(weight.data[ids], (weight,), backward)


def gather_rows(source: Tensor, index: np.ndarray) -> Tensor:
    """``source[index]`` along axis 0 for an integer index array of any shape."""
    return embedding(source, index)


# ---------------------------------------------------------------------------
# fused normalisation / probability ops
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    wd = weight.data
    out = xhat * wd + bias.data
    d = xd.shape[-1]

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * wd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NonFiniteError("non-finite logits")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation. ``x`` is [C_in, L] or [B, C_in, L]; weight [C_out, C_in, K]."""
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    wd = weight.data
    B, C_in, L = xd.shape
    C_out, wc, K = wd.shape
    if wc != C_in:
        raise ShapeError(f"conv1d expects {wc} input channels, got {C_in}")
    if K > L + 2 * padding:
        raise ShapeError(f"kernel {K} longer than padded input {L + 2 * padding}")
    L_out = (L + 2 * padding - K) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    # cols[b, l, c, k] = xp[b, c, l*stride + k]
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, : (L_out - 1) * stride + 1 : stride, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B, L_out, C_in * K)
    w2 = wd.reshape(C_out, C_in * K)
    out = cols @ w2.T  # [B, L_out, C_out]
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 2, 1)
    if squeeze:
        out = out[0]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g3 = (g[None] if squeeze else g).transpose(0, 2, 1)  # [B, L_out, C_out]
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g3, cols, axes=([0, 1], [0, 1])).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 1))
        if x.requires_grad:
            gcols = (g3 @ w2).reshape(B, L_out, C_in, K)
            gxp = np.zeros_like(xp)
            span = (L_out - 1) * stride + 1
            for k in range(K):
                gxp[:, :, k : k + span : stride] += gcols[:, :, :, k].transpose(0, 2, 1)
            gx = gxp[:, :, padding : padding + L] if padding else gxp
            if squeeze:
                gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(np.ascontiguousarray(out), parents, backward)


def conv_out_length(L: int, kernel: int, stride: int, padding: int) -> int:
    return (L + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _position_weights(shape: tuple[int, ...], mask: np.ndarray | None, dtype) -> np.ndarray:
    """Weights for a per-sequence mean over positions followed by a batch mean.

    ``shape`` is the leading (…, T) shape of the per-position losses. The last
    axis is the position axis; any leading axis is a batch axis.
    """
    if mask is None:
        mask = np.ones(shape, dtype=dtype)
    mask = np.asarray(mask, dtype=dtype)
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ShapeError("a sequence has no scored positions")
    w = mask / counts
    n_seq = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
    return w / n_seq


def kl_divergence(teacher_probs, student_log_probs: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Cross term ``-mean_j sum_y p(y) log q(y)``.

    Differs from KL(p||q) by the teacher entropy, see :func:`entropy`. Gradient
    flows only into the student side.
    """
    p = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs)
    lq = student_log_probs.data
    if p.shape != lq.shape:
        raise ShapeError(f"teacher {p.shape} vs student {lq.shape}")
    w = _position_weights(lq.shape[:-1], mask, lq.dtype)
    per_pos = -(p * lq).sum(axis=-1)
    value = np.asarray((per_pos * w).sum())
    if not np.isfinite(value):
        raise NonFiniteError("non-finite KL cross term")

    def backward(g):
        return (-g * p * w[..., None],)

    return _make(value, (student_log_probs,), backward)


def entropy(probs: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Teacher entropy under the same reduction as :func:`kl_divergence`."""
    probs = np.asarray(probs)
    w = _position_weights(probs.shape[:-1], mask, probs.dtype)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    return float((-plogp.sum(axis=-1) * w).sum())


def cross_entropy(log_probs: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` (shape = log_probs.shape[:-1])."""
    lp = log_probs.data
    targets = np.asarray(targets)
    if targets.shape != lp.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} vs log-probs {lp.shape}")
    w = _position_weights(lp.shape[:-1], mask, lp.dtype)
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    value = np.asarray(-(picked * w).sum())
    if not np.isfinite(value):
        raise NonFiniteError("non-finite cross-entropy")

    def backward(g):
        full = np.zeros_like(lp)
        np.put_along_axis(full, targets[..., None], (-g * w)[..., None], axis=-1)
        return (full,)

    return _make(value, (log_probs,), backward)


def stack_scalars(values: Iterable[Tensor]) -> Tensor:
    vals = [as_tensor(v) for v in values]
    return concat([reshape(v, (1,)) for v in vals], axis=0)
