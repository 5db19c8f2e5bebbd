from .tensor import Tensor, Tape, active_tape, as_tensor, get_default_dtype, set_default_dtype, using_dtype
from .ops import (
    ShapeError,
    add,
    sub,
    mul,
    scale,
    matmul,
    transpose,
    reshape,
    leaky_relu,
    softmax,
    masked_softmax,
    layer_norm,
    dropout,
    cross_entropy,
    mean_cross_entropy,
    sum_all,
    mean_all,
    slice_rows,
    concat_rows,
)
from .optim import AdamState, adam_step, sgd_step, glorot_init, zeros_init, ones_init
from .gradcheck import GradCheckReport, grad_check

__all__ = [
    "Tensor", "Tape", "active_tape", "as_tensor",
    "get_default_dtype", "set_default_dtype", "using_dtype",
    "ShapeError", "add", "sub", "mul", "scale", "matmul", "transpose", "reshape",
    "leaky_relu", "softmax", "masked_softmax", "layer_norm", "dropout",
    "cross_entropy", "mean_cross_entropy", "sum_all", "mean_all",
    "slice_rows", "concat_rows",
    "AdamState", "adam_step", "sgd_step", "glorot_init", "zeros_init", "ones_init",
    "GradCheckReport", "grad_check",
]
