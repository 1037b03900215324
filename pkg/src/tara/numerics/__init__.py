"""Dense float64 matrices, a reverse-mode tape, and gradient verification."""

from .gradcheck import BlockReport, FdReport, fd_check
from .matrix import Matrix, NonFiniteError, NumericsError, ShapeError, same_bits
from .tape import (
    Tape,
    absolute,
    add,
    add_rowvec,
    col_add,
    col_scatter,
    col_select,
    concat_cols,
    grad,
    hadamard,
    l1_norm,
    matmul,
    mean_all,
    mean_sq_error,
    scale,
    slice_cols,
    slice_rows,
    softmax_rows,
    square,
    sub,
    sum_all,
    tanh,
    transpose,
)

__all__ = [
    "Matrix",
    "NumericsError",
    "ShapeError",
    "NonFiniteError",
    "same_bits",
    "Tape",
    "grad",
    "matmul",
    "add",
    "sub",
    "scale",
    "hadamard",
    "transpose",
    "add_rowvec",
    "tanh",
    "square",
    "absolute",
    "sum_all",
    "mean_all",
    "softmax_rows",
    "col_select",
    "col_scatter",
    "col_add",
    "slice_rows",
    "slice_cols",
    "concat_cols",
    "l1_norm",
    "mean_sq_error",
    "fd_check",
    "FdReport",
    "BlockReport",
]
