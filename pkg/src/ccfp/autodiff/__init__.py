from .gradcheck import gradcheck, numerical_gradient, relative_error
from .ops import (
    batch_norm2d,
    channel_stats,
    conv2d,
    exp,
    frobenius_norm,
    global_avg_pool,
    l2_squared,
    linear,
    log,
    max_pool2d,
    relu,
    softmax_cross_entropy,
    sqrt,
    square,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, ensure_tensor, is_grad_enabled, matmul, no_grad, unbroadcast

__all__ = [
    "Adam", "AdamState", "Tensor", "adam_step", "batch_norm2d", "channel_stats", "conv2d",
    "ensure_tensor", "exp", "frobenius_norm", "global_avg_pool", "gradcheck", "is_grad_enabled",
    "l2_squared", "linear", "log", "matmul", "max_pool2d", "no_grad", "numerical_gradient",
    "relative_error", "relu", "softmax_cross_entropy", "sqrt", "square", "unbroadcast",
]
