"""Minimal reverse-mode autodiff engine."""

from .core import (
    GraphError,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    clamp,
    concat,
    default_dtype,
    detach,
    div,
    exp,
    gelu,
    get_default_dtype,
    getitem,
    is_grad_enabled,
    linear,
    log,
    matmul,
    maximum,
    mean,
    mean_pool,
    minimum,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softplus,
    sqrt,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
    where,
)
from .functional import attention, conv1d, dwconv1d, layer_norm, log_softmax, softmax
from .optim import Adam, AdamState, NumericalError, adam_step
from .rng import Rng

__all__ = [name for name in dir() if not name.startswith("_")]
