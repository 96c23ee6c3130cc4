"""Float64 tensors, differentiable primitives, and gradient verification."""

from .gradcheck import finite_difference_check
from .ops import (
    add,
    add_scalar,
    avg_pool3d,
    broadcast_mul,
    clip_min,
    concat,
    constant,
    conv2d,
    conv3d,
    dropout,
    elementwise_mul,
    l2_normalize_eps,
    log,
    matmul,
    mean_axis,
    mul_scalar,
    neg,
    pow_scalar,
    primitive_forward,
    relu,
    reshape,
    sigmoid,
    softmax_lastdim,
    stack,
    sub,
    sum_axis,
    tanh,
    transpose,
)
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeMismatchError,
    Tensor,
    active_tape,
    backward,
)

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "TapeMismatchError",
    "Tensor",
    "active_tape",
    "add",
    "add_scalar",
    "avg_pool3d",
    "backward",
    "broadcast_mul",
    "clip_min",
    "concat",
    "constant",
    "conv2d",
    "conv3d",
    "dropout",
    "elementwise_mul",
    "finite_difference_check",
    "l2_normalize_eps",
    "log",
    "matmul",
    "mean_axis",
    "mul_scalar",
    "neg",
    "pow_scalar",
    "primitive_forward",
    "relu",
    "reshape",
    "sigmoid",
    "softmax_lastdim",
    "stack",
    "sub",
    "sum_axis",
    "tanh",
    "transpose",
]
