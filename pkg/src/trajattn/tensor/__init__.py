"""Minimal dense tensor layer: numpy-backed kernels, a reverse-mode tape,
counter-based RNG, and a bit-exact fixture format.

The functions re-exported here accept plain arrays (fast path) or tape
``Var`` nodes (recorded path) interchangeably.
"""

from .autodiff import (
    Tape,
    Var,
    add,
    concat,
    cross_entropy_logits,
    fd_gradient,
    gelu,
    layer_norm,
    matmul,
    mean_axis,
    mul,
    reshape,
    scale,
    softmax_rows,
    sub,
    sum_all,
    take,
    time_diagonal,
    transpose,
    value_of,
)
from .fixture import FixtureError, read_tensor, write_tensor
from .ops import as_tensor
from .rng import Rng

__all__ = [
    "Tape",
    "Var",
    "Rng",
    "FixtureError",
    "read_tensor",
    "write_tensor",
    "as_tensor",
    "value_of",
    "fd_gradient",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "take",
    "concat",
    "time_diagonal",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "mean_axis",
    "sum_all",
    "cross_entropy_logits",
]
