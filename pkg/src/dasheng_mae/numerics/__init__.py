from .rng import Rng
from .tensor import (
    Tensor,
    add,
    cross_entropy,
    default_dtype,
    gather_rows,
    gelu,
    get_default_dtype,
    getitem,
    layernorm,
    linear,
    matmul,
    mean_all,
    mul,
    neg,
    no_grad,
    reshape,
    scale,
    scatter_rows,
    set_default_dtype,
    softmax,
    square,
    sub,
    sum_all,
    transpose,
)
from .init import trunc_normal

__all__ = [
    "Rng",
    "Tensor",
    "add",
    "cross_entropy",
    "default_dtype",
    "gather_rows",
    "gelu",
    "get_default_dtype",
    "getitem",
    "layernorm",
    "linear",
    "matmul",
    "mean_all",
    "mul",
    "neg",
    "no_grad",
    "reshape",
    "scale",
    "scatter_rows",
    "set_default_dtype",
    "softmax",
    "square",
    "sub",
    "sum_all",
    "transpose",
    "trunc_normal",
]
