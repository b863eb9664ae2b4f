"""Minimal reverse-mode differentiable tensor layer on top of numpy."""

from . import ops
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    add,
    add_mask,
    broadcast_to,
    concat,
    exp,
    gather,
    gelu,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    pad,
    relu,
    reshape,
    roll,
    scale,
    sigmoid,
    slice_,
    softmax,
    square,
    sub,
    sum_,
    transpose,
    unfold,
)
from .serialize import CheckpointError, load_arrays, read_header, save_arrays
from .tensor import ShapeError, Tensor, as_tensor, grad_enabled, no_grad

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "no_grad",
    "grad_enabled",
    "grad_check",
    "GradCheckReport",
    "save_arrays",
    "load_arrays",
    "read_header",
    "CheckpointError",
    "ops",
    "add",
    "add_mask",
    "broadcast_to",
    "concat",
    "exp",
    "gather",
    "gelu",
    "layer_norm",
    "log",
    "matmul",
    "mean",
    "mul",
    "pad",
    "relu",
    "reshape",
    "roll",
    "scale",
    "sigmoid",
    "slice_",
    "softmax",
    "square",
    "sub",
    "sum_",
    "transpose",
    "unfold",
]
