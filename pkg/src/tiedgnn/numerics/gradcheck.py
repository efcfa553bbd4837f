"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    floor: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest coordinate-wise relative error between tape and numeric gradients.

    ``f`` closes over ``params`` and must be deterministic. The relative
    error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps derivatives that are zero up to roundoff from dominating. When
    ``max_coords`` is given, at most that many coordinates per parameter
    are probed (chosen with ``seed``).
    """
    with Tape() as tape:
        loss = f()
    if loss.requires_grad:
        tape.backward(loss)
        analytic = tape.gradients(params)
    else:
        analytic = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), floor)
            worst = max(worst, err)
    return worst
