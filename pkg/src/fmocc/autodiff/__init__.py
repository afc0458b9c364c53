from .gradcheck import grad_check
from .ops import (
    add,
    apply_unary,
    concat,
    cross_entropy,
    layer_norm,
    matmul,
    mse,
    sigmoid,
    softplus,
    stack,
)
from .optim import AdamWState, adamw_step
from .tensor import Tape, Tensor, backward, current_tape, no_tape, zero_grads

__all__ = [
    "AdamWState",
    "Tape",
    "Tensor",
    "adamw_step",
    "add",
    "apply_unary",
    "backward",
    "concat",
    "cross_entropy",
    "current_tape",
    "grad_check",
    "layer_norm",
    "matmul",
    "mse",
    "no_tape",
    "sigmoid",
    "softplus",
    "stack",
    "zero_grads",
]
