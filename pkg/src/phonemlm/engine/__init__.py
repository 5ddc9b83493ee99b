"""Minimal numpy tensor engine: reverse-mode autodiff, Adam, gradient checks."""
from .gradcheck import gradient_check
from .optim import Adam, AdamState, NonFiniteGradientError, adam_step, clip_grad_norm, warmup_linear
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    default_dtype,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    precision,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    take_rows,
    transpose,
    tsum,
)
