from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError
from .tensor import Tape, Tensor, no_tape


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords_per_param: int = 24,
    seed: int = 0,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads ``params`` by closure. Coordinates are
    sampled per parameter (all of them when the parameter is small enough).
    The error per coordinate is |analytic - numeric| / max(1e-8, |numeric|).
    """
    with no_tape():
        first = f().item()
        second = f().item()
    if first != second:
        raise ContractError("grad_check: f is not deterministic for fixed params")

    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        base = p.data.copy()
        flat_count = base.size
        if flat_count <= max_coords_per_param:
            coords = np.arange(flat_count)
        else:
            coords = rng.choice(flat_count, size=max_coords_per_param, replace=False)
        try:
            for c in coords:
                idx = np.unravel_index(c, base.shape)
                bumped = base.copy()
                bumped[idx] += h
                p.data = bumped
                with no_tape():
                    fp = f().item()
                bumped = base.copy()
                bumped[idx] -= h
                p.data = bumped
                with no_tape():
                    fm = f().item()
                numeric = (fp - fm) / (2.0 * h)
                err = abs(g[idx] - numeric) / max(1e-8, abs(numeric))
                worst = max(worst, err)
        finally:
            p.data = base
    return worst
