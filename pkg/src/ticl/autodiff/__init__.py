"""Minimal reverse-mode autodiff over numpy arrays."""

from .gradcheck import GradCheckReport, NonDeterministicError, finite_difference_check
from .ops import (
    LabelError,
    add,
    broadcast_to,
    concat,
    cross_entropy,
    feature_distance,
    gelu,
    getitem,
    layer_norm,
    matmul,
    mean,
    mul,
    reshape,
    sigmoid,
    softmax,
    sub,
    sum,
    transpose,
)
from .optim import MissingGradientError, Optimizer, OptimizerConfig, cosine_lr, optimizer_step
from .tensor import (
    AutodiffError,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    active_tape,
    backward,
    no_grad,
)

__all__ = [
    "AutodiffError", "GradCheckReport", "LabelError", "MissingGradientError",
    "NonDeterministicError", "NonFiniteError", "Optimizer", "OptimizerConfig",
    "Parameter", "ShapeError", "Tape", "TapeError", "Tensor", "active_tape", "add",
    "backward", "broadcast_to", "concat", "cosine_lr", "cross_entropy",
    "feature_distance", "finite_difference_check", "gelu", "getitem", "layer_norm",
    "matmul", "mean", "mul", "no_grad", "optimizer_step", "reshape", "sigmoid",
    "softmax", "sub", "sum", "transpose",
]
