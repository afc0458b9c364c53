"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamWState,
) -> None:
    """Update ``params`` in place. Parameters whose gradient is None are left alone."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"adamw: grad for {name} has shape {g.shape}, param {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        elif m.shape != p.shape:
            raise ContractError(f"adamw: moment for {name} has shape {m.shape}, param {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        decayed = p.data * (1.0 - state.lr * state.weight_decay)
        p.data = decayed - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
