"""Minimal reverse-mode autodiff: a per-batch tape, the ops the VAEs need, Adam."""

from .ops import (
    DegeneratePoseError,
    ShapeError,
    add,
    bernoulli_nll,
    conv2d,
    dense,
    exp,
    flatten,
    kl_diag_gaussian,
    mean,
    mul,
    relu,
    reparameterize,
    reshape,
    rows,
    scale,
    sigmoid,
    squared_distance,
    sub,
    total,
    unit_rows,
    upsample_nearest,
)
from .optim import AdamState, NonFiniteGradientError, ParamSet, adam_step, glorot_uniform
from .tape import Tape, Tensor, as_tensor

__all__ = [
    "AdamState", "DegeneratePoseError", "NonFiniteGradientError", "ParamSet", "ShapeError",
    "Tape", "Tensor", "adam_step", "add", "as_tensor", "bernoulli_nll", "conv2d", "dense",
    "exp", "flatten", "glorot_uniform", "kl_diag_gaussian", "mean", "mul", "relu",
    "reparameterize", "reshape", "rows", "scale", "sigmoid", "squared_distance", "sub",
    "total", "unit_rows", "upsample_nearest",
]
