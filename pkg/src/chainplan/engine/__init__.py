"""Tensor engine: arrays, tape-based autodiff, attention, checkpoints."""

from .core import (
    OPS,
    EngineError,
    NonFiniteError,
    Parameter,
    Tape,
    Tensor,
    active_tape,
    add,
    apply,
    backprop,
    clip_min,
    concat,
    conv1d,
    default_dtype,
    expand,
    finite_checks,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    scale,
    set_default_dtype,
    slice_axis,
    softmax,
    sub,
    take,
    total,
    transpose,
    using_dtype,
)
from .checkpoint import CheckpointError, load_into, load_parameters, save_parameters
from .gradcheck import gradient_check
from .nn import (
    AttentionParams,
    LayerNorm,
    Linear,
    MLP3,
    multi_head_attention,
    xavier_uniform,
)

__all__ = [
    "OPS", "EngineError", "NonFiniteError", "Parameter", "Tape", "Tensor",
    "active_tape", "add", "apply", "backprop", "clip_min", "concat", "conv1d",
    "default_dtype", "expand", "finite_checks", "layer_norm", "log", "matmul",
    "mean", "mul",
    "neg", "power", "relu", "reshape", "scale", "set_default_dtype",
    "slice_axis", "softmax", "sub", "take", "total", "transpose", "using_dtype",
    "CheckpointError", "load_into", "load_parameters", "save_parameters",
    "gradient_check", "AttentionParams", "LayerNorm", "Linear", "MLP3",
    "multi_head_attention", "xavier_uniform",
]
