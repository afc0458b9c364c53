"""Per-voxel MLP classifier over refined features."""

from __future__ import annotations

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, as_tensor
from .errors import DimensionError
from .nn import Linear, Module


class OccHead(Module):
    def __init__(self, channels: int, num_classes: int, hidden: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, num_classes, rng)

    @property
    def channels(self) -> int:
        return self.fc1.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.fc2.weight.shape[1]


def occ_head(V, head: OccHead) -> Tensor:
    """Logits ``[..., num_classes]`` for every voxel of ``V[..., C]``."""
    V = as_tensor(V)
    if V.shape[-1] != head.channels:
        raise DimensionError(f"occ_head: features have {V.shape[-1]} channels, head expects "
                             f"{head.channels}")
    return head.fc2(ops.relu(head.fc1(V)))


def softmax(logits) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.exp(ops.log_softmax_np(data))
