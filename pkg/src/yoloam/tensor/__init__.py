"""Numeric core: dense tensors, reverse-mode autodiff and the layer kernels."""

from .core import (
    Tensor,
    add,
    arctan,
    as_tensor,
    clamp,
    concat,
    div,
    exp,
    is_grad_enabled,
    linear,
    log,
    log_softmax,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    no_grad,
    permute,
    power,
    relu,
    reshape,
    sigmoid,
    silu,
    softmax,
    split,
    sqrt,
    tmax,
    tsum,
)
from .functional import (
    batchnorm2d,
    conv1d,
    conv2d,
    conv_out_size,
    gap,
    gmp,
    groupnorm,
    maxpool2d,
    upsample_nearest2x,
)
from .gradcheck import gradcheck, numeric_grad
from .kernels import BACKEND as KERNEL_BACKEND
