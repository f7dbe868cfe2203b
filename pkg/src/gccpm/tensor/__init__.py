"""A small dense tensor library with reverse-mode differentiation."""

from gccpm.tensor.core import (
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    no_grad,
    placeholder,
    precision,
    shape_only,
)
from gccpm.tensor.gradcheck import finite_diff_check
from gccpm.tensor.ops import (
    ConvSpec,
    PoolKind,
    UpsampleMode,
    add,
    concat,
    conv2d,
    conv_output_size,
    eltwise,
    mul,
    pool2d,
    relu,
    total,
    upsample,
    weighted_squared_error,
)
from gccpm.tensor.optim import Adam, AdamState, adam_step

__all__ = [
    "Adam",
    "AdamState",
    "ConvSpec",
    "PoolKind",
    "Tensor",
    "UpsampleMode",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "conv2d",
    "conv_output_size",
    "default_dtype",
    "eltwise",
    "finite_diff_check",
    "mul",
    "no_grad",
    "placeholder",
    "pool2d",
    "precision",
    "relu",
    "shape_only",
    "total",
    "upsample",
    "weighted_squared_error",
]
