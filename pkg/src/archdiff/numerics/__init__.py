from archdiff.numerics.optim import AdamState, Ema, adam_step, clip_global_norm, global_norm, warmup_lr
from archdiff.numerics.rng import Rng, randn
from archdiff.numerics.tensor import (
    MASK_VALUE,
    GradMap,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    dropout,
    exp,
    grad_of,
    log,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    softmax_masked,
    square,
    sub,
    sum_,
    swapaxes,
    swish,
    transpose,
)

__all__ = [
    "AdamState", "Ema", "GradMap", "MASK_VALUE", "Rng", "Tape", "Tensor",
    "adam_step", "add", "as_tensor", "backward", "clip_global_norm", "concat", "dropout",
    "exp", "global_norm", "grad_of", "log", "matmul", "mean", "mse", "mul", "no_grad",
    "randn", "relu", "reshape", "scale", "sigmoid", "softmax", "softmax_masked", "square",
    "sub", "sum_", "swapaxes", "swish", "transpose", "warmup_lr",
]
