"""Minimal dense-tensor engine: autodiff tape, AdamW, and the LR schedule."""

from .gradcheck import max_relative_error, numeric_gradient
from .optim import LrSchedule, OptimizerState, adamw_step, lr_at, steps_per_epoch
from .recurrent import lstm_scan
from .tensor import (
    Tape,
    Tensor,
    active_tape,
    add,
    backward,
    concat,
    div,
    exp,
    log,
    masked_softmax,
    matmul,
    mean,
    mul,
    power,
    reshape,
    sigmoid,
    square,
    stack,
    sub,
    sum_,
    swap_last,
    take,
    tanh,
    transpose,
)

__all__ = [
    "LrSchedule",
    "OptimizerState",
    "Tape",
    "Tensor",
    "active_tape",
    "adamw_step",
    "add",
    "backward",
    "concat",
    "div",
    "exp",
    "log",
    "lr_at",
    "lstm_scan",
    "masked_softmax",
    "matmul",
    "max_relative_error",
    "mean",
    "mul",
    "numeric_gradient",
    "power",
    "reshape",
    "sigmoid",
    "square",
    "stack",
    "steps_per_epoch",
    "sub",
    "sum_",
    "swap_last",
    "take",
    "tanh",
    "transpose",
]
