"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    coords_per_tensor: int = 64,
    seed: int = 0,
    floor: float = 1e-4,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` recomputes a scalar loss from the current parameter values. Each
    tensor contributes ``coords_per_tensor`` random coordinates (all of them
    when smaller). Relative error is ``|a - n| / max(|a|, |n|, floor)``, so
    coordinates whose gradient is below ``floor`` are judged absolutely.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("gradient_check needs float64 parameters")
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= coords_per_tensor else rng.choice(n, coords_per_tensor, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = float(f().data)
            flat[c] = orig - h
            down = float(f().data)
            flat[c] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while perturbing {p.name or 'tensor'}[{c}]")
            numeric = (up - down) / (2 * h)
            a = float(analytic.reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
