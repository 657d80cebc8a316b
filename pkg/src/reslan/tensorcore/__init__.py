"""Minimal reverse-mode differentiation engine on numpy float64 arrays."""
from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .ops import (
    SPARSE_EPS,
    add,
    avgpool2d,
    concat,
    conv2d,
    dense,
    div,
    exp,
    flatten,
    log,
    maxpool2d,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sparse_conv2d,
    sub,
    sum,
    upsample2d,
    window_max,
)
from .optim import Adam, AdamConfig, AdamState, optimizer_step
from .tensor import Tape, Tensor, backward, constant, current_tape, no_grad, parameter
