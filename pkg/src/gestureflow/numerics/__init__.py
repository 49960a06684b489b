"""Differentiable tensor substrate: tape, layers, optimizer, gradient checks."""

from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    concat,
    conv1d,
    finite_checks,
    gather_rows,
    gelu,
    graph_nodes,
    layer_norm,
    linear,
    matmul,
    reshape,
    softmax_rows,
    stop_gradient,
    stop_gradient_replace,
    tmean,
    transpose,
    tsum,
    upsample2_linear,
)
from .nn import Conv1d, Embedding, FeedForward, LayerNorm, Linear, Module, param, zeros_param
from .optim import Adam, AdamState, adam_step
from .gradcheck import check_gradients, gradient_error
from .threading import single_thread_blas

__all__ = [
    "Adam",
    "AdamState",
    "Conv1d",
    "Embedding",
    "FeedForward",
    "LayerNorm",
    "Linear",
    "Module",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "check_gradients",
    "concat",
    "conv1d",
    "finite_checks",
    "gather_rows",
    "gelu",
    "gradient_error",
    "graph_nodes",
    "layer_norm",
    "linear",
    "matmul",
    "param",
    "reshape",
    "single_thread_blas",
    "softmax_rows",
    "stop_gradient",
    "stop_gradient_replace",
    "tmean",
    "transpose",
    "tsum",
    "upsample2_linear",
    "zeros_param",
]
