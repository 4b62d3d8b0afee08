from .gradcheck import grad_check
from .optim import Adam
from .rng import Rng
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    concat,
    cross_entropy,
    embed_lookup,
    get_default_dtype,
    layer_norm,
    matmul,
    mean_all,
    mul,
    pad_rows,
    reshape,
    scale,
    set_default_dtype,
    set_finite_checks,
    silu,
    softmax,
    stack,
    sub,
    sum_all,
    take_rows,
    tensor,
    transpose,
    zeros,
)

__all__ = [
    "Adam", "NonFiniteError", "Rng", "ShapeError", "Tape", "Tensor",
    "add", "concat", "cross_entropy", "embed_lookup", "get_default_dtype",
    "grad_check", "layer_norm", "matmul", "mean_all", "mul", "pad_rows",
    "reshape", "scale", "set_default_dtype", "set_finite_checks", "silu",
    "softmax", "stack", "sub", "sum_all", "take_rows", "tensor",
    "transpose", "zeros",
]
