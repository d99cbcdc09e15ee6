"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .optim import ParameterStore


def gradient_check(
    f: Callable[[], T.Tensor],
    point: ParameterStore,
    eps: float = 1e-6,
    names: Sequence[str] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest element-wise relative error between autodiff and central differences.

    ``f`` closes over the tensors in ``point`` and returns a scalar. Relative
    error is ``|a - n| / max(|a|, |n|, floor)``. With ``max_entries`` a seeded
    random subset of coordinates is probed instead of every one.
    """
    names = list(names) if names is not None else point.trainable()
    point.zero_grad()
    out = f()
    out.backward()
    analytic = {n: (point[n].grad.copy() if point[n].grad is not None
                    else np.zeros_like(point[n].data)) for n in names}

    coords = [(n, i) for n in names for i in range(point[n].data.size)]
    if max_entries is not None and len(coords) > max_entries:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_entries, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    with T.no_grad():
        for n, i in coords:
            flat = point[n].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = float(analytic[n].reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    point.zero_grad()
    return worst
