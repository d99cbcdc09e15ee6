"""Named parameter storage and the decoupled-weight-decay Adam optimizer."""

from __future__ import annotations

import fnmatch
import math
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .tensor import NonFiniteError, Tensor


class ContractError(RuntimeError):
    """A caller broke an operation's precondition."""


class ParameterStore:
    """Ordered mapping of hierarchical names to leaf tensors plus a trainable set."""

    def __init__(self) -> None:
        self.entries: dict[str, Tensor] = {}
        self.trainable_set: set[str] = set()

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(data), requires_grad=trainable, name=name)
        self.entries[name] = t
        if trainable:
            self.trainable_set.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self, pattern: str | None = None) -> list[str]:
        if pattern is None:
            return list(self.entries)
        return [n for n in self.entries if fnmatch.fnmatchcase(n, pattern)]

    def items(self):
        return self.entries.items()

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        self.trainable_set = {n for n in self.entries if predicate(n)}
        for n, t in self.entries.items():
            t.requires_grad = n in self.trainable_set
            t.grad = None

    def trainable(self) -> list[str]:
        return [n for n in self.entries if n in self.trainable_set]

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(t.data.size for n, t in self.entries.items()
                   if not trainable_only or n in self.trainable_set)

    def astype(self, dtype) -> None:
        for t in self.entries.values():
            t.data = t.data.astype(dtype)
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.entries.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self.entries) - set(state)
            extra = set(state) - set(self.entries)
            if missing or extra:
                raise ContractError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for n, arr in state.items():
            if n not in self.entries:
                continue
            t = self.entries[n]
            if t.data.shape != arr.shape:
                raise ContractError(f"{n}: shape {arr.shape} != {t.data.shape}")
            t.data = np.array(arr, dtype=t.data.dtype, copy=True)

    def checksum(self, pattern: str = "*") -> str:
        """SHA-256 over the raw bytes of every parameter matching ``pattern``."""
        h = hashlib.sha256()
        for n in self.names(pattern):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.entries[n].data).tobytes())
        return h.hexdigest()


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class OptimizerState:
    config: AdamWConfig = field(default_factory=AdamWConfig)
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(store: ParameterStore, state: OptimizerState, lr: float | None = None) -> None:
    """One in-place AdamW update of every trainable parameter.

    Weight decay is decoupled: ``w -= lr * wd * w`` before the Adam step.
    """
    cfg = state.config
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    names = store.trainable()
    for n in names:
        if store[n].grad is None:
            raise ContractError(f"trainable parameter {n!r} has no gradient")
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for n in names:
        p = store[n]
        g = p.grad
        if n not in state.m:
            state.m[n] = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
        m, v = state.m[n], state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w = p.data
        if cfg.weight_decay:
            w = w - lr * cfg.weight_decay * w
        p.data = (w - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(p.data.dtype, copy=False)
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"parameter {n!r} became non-finite")


def global_grad_norm(store: ParameterStore) -> float:
    total = 0.0
    for n in store.trainable():
        g = store[n].grad
        if g is not None:
            total += float(np.sum(g.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(store: ParameterStore, max_norm: float) -> float:
    """Scale trainable gradients so their global L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(store)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for n in store.trainable():
            t = store[n]
            if t.grad is not None:
                t.grad = (t.grad * scale).astype(t.grad.dtype, copy=False)
    return norm


def lr_schedule(step: int, total: int, peak: float, warmup: int) -> float:
    """Linear warmup then cosine decay to 10% of the peak."""
    if step < warmup:
        return peak * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return peak * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))
