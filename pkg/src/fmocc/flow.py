"""Straight-path flow matching over voxel features."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, as_tensor
from .errors import ContractError, DimensionError
from .nn import Module
from .ssm import DEFAULT_CHUNK, TpvSsmLayer
from .tpv import tpv_aggregate, tpv_reduce


def _time_column(t, ndim: int) -> np.ndarray | float:
    """Scalar t, or per-sample t reshaped to broadcast over (B, X, Y, Z, C)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ContractError(f"t must lie in [0, 1], got {t}")
    if t.ndim == 0:
        return float(t)
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def otp_interpolate(V0, V1, t):
    """``t * V1 + (1 - t) * V0``. Arrays in, array out; any Tensor input yields a Tensor."""
    if np.shape(V0) != np.shape(V1 if not isinstance(V1, Tensor) else V1.data):
        raise DimensionError(f"otp_interpolate: shapes {np.shape(V0)} and {np.shape(V1)} differ")
    if not isinstance(V0, Tensor) and not isinstance(V1, Tensor):
        tc = _time_column(t, np.ndim(V0))
        return tc * np.asarray(V1) + (1.0 - tc) * np.asarray(V0)
    V0, V1 = as_tensor(V0), as_tensor(V1)
    tc = _time_column(t, V0.ndim)
    return ops.add(ops.mul(V1, tc), ops.mul(V0, 1.0 - tc))


def target_velocity(V0, V1):
    if np.shape(V0) != (V1.shape if isinstance(V1, Tensor) else np.shape(V1)):
        raise DimensionError("target_velocity: shape mismatch")
    if isinstance(V0, Tensor) or isinstance(V1, Tensor):
        return ops.sub(V1, V0)
    return np.asarray(V1) - np.asarray(V0)


class VelocityModel(Module):
    """TPV-SSM velocity field on voxel grids: reduce, three plane branches, aggregate."""

    def __init__(self, channels: int, state_size: int = 8, depth: int = 2, seed: int = 0,
                 share_planes: bool = False, zero_out: bool = True, chunk: int = DEFAULT_CHUNK):
        self.layer = TpvSsmLayer(channels, state_size, depth, seed, share_planes, zero_out)
        self._chunk = chunk

    @property
    def channels(self) -> int:
        return self.layer.channels

    def __call__(self, V_t, t) -> Tensor:
        return predict_velocity(V_t, t, self)


def predict_velocity(V_t, t, model: VelocityModel) -> Tensor:
    V_t = as_tensor(V_t)
    if V_t.shape[-1] != model.channels:
        raise DimensionError(
            f"velocity model expects {model.channels} channels, got {V_t.shape[-1]}"
        )
    triplet = tpv_reduce(V_t)
    return tpv_aggregate(model.layer(triplet, t, model._chunk))


def flow_loss(v_pred, V0, V1) -> Tensor:
    """Mean squared error between predicted velocity and ``V1 - V0``."""
    v_pred = as_tensor(v_pred)
    target = target_velocity(V0, V1)
    return ops.mse(v_pred, target)


def euler_integrate(V0, model: Callable, n_steps: int):
    """Integrate ``dV/dt = model(V, t)`` from t=0 to 1 with ``n_steps`` equal steps."""
    if n_steps < 1:
        raise ContractError(f"n_steps must be >= 1, got {n_steps}")
    dt = 1.0 / n_steps
    V = V0
    for i in range(n_steps):
        v = model(V, i / n_steps)
        if isinstance(V, Tensor) or isinstance(v, Tensor):
            V = ops.add(V, ops.mul(v, dt))
        else:
            V = np.asarray(V) + dt * np.asarray(v)
    return V
