from mrcfa.core.gradcheck import GradCheckReport, NumericError, grad_check
from mrcfa.core.nn import Conv2d, Linear, Module, Parameter, PointwiseConv, set_dirac
from mrcfa.core.ops import (
    add,
    add_n,
    bilinear_resize,
    bilinear_upsample,
    conv2d,
    gather_cols,
    gather_rows,
    linear,
    matmul,
    mean,
    permute,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
    sum_all,
    topk_per_column,
    transpose,
)
from mrcfa.core.tensor import (
    DimensionError,
    Tensor,
    backward,
    build_tape,
    get_dtype,
    get_precision,
    no_grad,
    precision,
    set_precision,
)

__all__ = [
    "Conv2d",
    "DimensionError",
    "GradCheckReport",
    "Linear",
    "Module",
    "NumericError",
    "Parameter",
    "PointwiseConv",
    "Tensor",
    "add",
    "add_n",
    "backward",
    "bilinear_resize",
    "bilinear_upsample",
    "build_tape",
    "conv2d",
    "gather_cols",
    "gather_rows",
    "get_dtype",
    "get_precision",
    "grad_check",
    "linear",
    "matmul",
    "mean",
    "no_grad",
    "permute",
    "precision",
    "relu",
    "reshape",
    "scale",
    "set_dirac",
    "set_precision",
    "softmax_cross_entropy",
    "sum_all",
    "topk_per_column",
    "transpose",
]
