"""Label encoding and the voxel <-> tri-perspective-view maps.

Axis convention for a voxel grid ``V[..., X, Y, Z, C]``:

* ``xy`` plane ``[..., X, Y, C]`` is the mean over z (top view)
* ``yz`` plane ``[..., Y, Z, C]`` is the mean over x
* ``zx`` plane ``[..., Z, X, C]`` is the mean over y
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, as_tensor
from .errors import ContractError, DimensionError
from .nn import Module, param


class LabelEmbedding(Module):
    def __init__(self, num_classes: int, channels: int, seed: int = 0, scale: float = 1.0,
                 trainable: bool = True):
        if scale <= 0:
            raise ContractError(f"embedding scale must be positive, got {scale}")
        rng = np.random.default_rng(seed)
        self.table = Tensor(rng.standard_normal((num_classes, channels)), requires_grad=trainable)
        self.scale = float(scale)

    @property
    def num_classes(self) -> int:
        return self.table.shape[0]


def encode_labels(labels, emb: LabelEmbedding) -> Tensor:
    """Target features ``(sigmoid(table[label])**2 - 1) * scale``; every value lies in (-scale, 0)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= emb.num_classes):
        raise ContractError(
            f"encode_labels: labels must lie in [0, {emb.num_classes}), "
            f"got range [{labels.min()}, {labels.max()}]"
        )
    rows = ops.getitem(emb.table, labels)
    # s**2 - 1 written as -(1 - s)(1 + s) keeps values near 0 from rounding to exactly 0;
    # the -scale end still rounds once sigmoid(x)**2 drops below half an ulp of 1 (x < ~-18)
    one_minus = ops.sigmoid(ops.mul(rows, -1.0))
    one_plus = ops.add(ops.sigmoid(rows), 1.0)
    return ops.mul(ops.mul(one_minus, one_plus), -emb.scale)


@dataclass
class TpvTriplet:
    plane_xy: Tensor
    plane_yz: Tensor
    plane_zx: Tensor

    def planes(self) -> list[Tensor]:
        return [self.plane_xy, self.plane_yz, self.plane_zx]

    @property
    def dims(self) -> tuple[int, int, int]:
        X, Y = self.plane_xy.shape[-3:-1]
        return X, Y, self.plane_yz.shape[-2]

    def validate(self) -> None:
        xy, yz, zx = (p.shape for p in self.planes())
        X, Y, Z = xy[-3], xy[-2], yz[-2]
        ok = (
            yz[-3] == Y
            and zx[-3] == Z
            and zx[-2] == X
            and xy[-1] == yz[-1] == zx[-1]
            and xy[:-3] == yz[:-3] == zx[:-3]
        )
        if not ok:
            raise DimensionError(f"inconsistent TPV planes: xy {xy}, yz {yz}, zx {zx}")


def tpv_reduce(V) -> TpvTriplet:
    V = as_tensor(V)
    if V.ndim < 4:
        raise DimensionError(f"tpv_reduce expects (..., X, Y, Z, C), got {V.shape}")
    nd = V.ndim
    xy = ops.mean(V, axis=nd - 2)
    yz = ops.mean(V, axis=nd - 4)
    xz = ops.mean(V, axis=nd - 3)
    axes = list(range(nd - 1))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    zx = ops.transpose(xz, axes)
    return TpvTriplet(xy, yz, zx)


def tpv_aggregate(T: TpvTriplet) -> Tensor:
    """``V[x, y, z] = xy[x, y] + yz[y, z] + zx[z, x]`` per channel."""
    T.validate()
    xy, yz, zx = T.planes()
    nd = xy.ndim
    lead = xy.shape[:-3]
    X, Y, Z = T.dims
    C = xy.shape[-1]
    a = ops.reshape(xy, lead + (X, Y, 1, C))
    b = ops.reshape(yz, lead + (1, Y, Z, C))
    axes = list(range(nd))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    c = ops.reshape(ops.transpose(zx, axes), lead + (X, 1, Z, C))
    return ops.add(ops.add(a, b), c)
