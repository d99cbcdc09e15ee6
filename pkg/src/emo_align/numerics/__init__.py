"""Deterministic reverse-mode autodiff over numpy, sized for the model's needs."""

from .gradcheck import gradient_check
from .optim import (
    AdamWConfig,
    ContractError,
    OptimizerState,
    ParameterStore,
    adamw_step,
    clip_grad_norm,
    global_grad_norm,
    lr_schedule,
)
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    concat,
    conv1d,
    conv_out_length,
    cross_entropy,
    div,
    embedding,
    entropy,
    exp,
    gather_rows,
    gelu,
    getitem,
    grad_enabled,
    kl_divergence,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    softmax,
    sub,
    tanh,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
