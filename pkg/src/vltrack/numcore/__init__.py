"""Deterministic tensor core: float32 arrays, a gradient tape, and primitives."""

from .gradcheck import GradCheckReport, grad_check
from .rng import named_stream, truncated_normal
from .tensor import (
    Tape,
    Tensor,
    absolute,
    add,
    as_tensor,
    clip,
    concat,
    conv2d,
    div,
    exp,
    gelu,
    layernorm,
    log,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    narrow,
    neg,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    sub,
    take_rows,
    tanh,
    tensor_sum,
    transpose,
)

__all__ = [
    "GradCheckReport",
    "Tape",
    "Tensor",
    "absolute",
    "add",
    "as_tensor",
    "clip",
    "concat",
    "conv2d",
    "div",
    "exp",
    "gelu",
    "grad_check",
    "layernorm",
    "log",
    "matmul",
    "maximum",
    "mean",
    "minimum",
    "mul",
    "named_stream",
    "narrow",
    "neg",
    "power",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "sqrt",
    "sub",
    "take_rows",
    "tanh",
    "tensor_sum",
    "transpose",
    "truncated_normal",
]
