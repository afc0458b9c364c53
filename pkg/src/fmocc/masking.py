"""Epoch-ramped voxel dropout used during training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class MaskSchedule:
    beta: float = 25.0
    E: int = 24

    def __post_init__(self):
        if not 0.0 <= self.beta <= 100.0:
            raise ContractError(f"beta must lie in [0, 100], got {self.beta}")
        if self.E < 1:
            raise ContractError(f"E must be >= 1, got {self.E}")

    def __call__(self, e: float) -> float:
        return mask_schedule(e, self.E, self.beta)


def mask_schedule(e: float, E: int, beta: float = 25.0) -> float:
    """Per-voxel drop probability ``(beta / 100) * (e / E)``."""
    if E < 1:
        raise ContractError(f"E must be >= 1, got {E}")
    if e < 0 or e > E:
        raise ContractError(f"epoch {e} outside [0, {E}]")
    return (beta / 100.0) * (e / E)


def keep_mask(shape, p_drop: float, seed) -> np.ndarray:
    if not 0.0 <= p_drop <= 1.0:
        raise ContractError(f"p_drop must lie in [0, 1], got {p_drop}")
    return np.random.default_rng(seed).random(tuple(shape)) >= p_drop


def apply_mask(V_input: np.ndarray, p_drop: float, seed) -> np.ndarray:
    """Zero whole voxels (all channels) independently with probability ``p_drop``.

    ``V_input`` is (..., X, Y, Z, C); the keep draw covers every axis but the last.
    """
    V_input = np.asarray(V_input, dtype=np.float64)
    if p_drop == 0.0:
        keep_mask(V_input.shape[:-1], p_drop, seed)  # validates only
        return V_input.copy()
    keep = keep_mask(V_input.shape[:-1], p_drop, seed)
    out = V_input.copy()
    out[~keep] = 0.0
    return out
