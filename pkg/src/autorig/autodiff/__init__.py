from .checkpoint import CheckpointError, load_tensors, save_tensors
from .optim import AdamW, AdamWState, adamw_step, multistep_lr
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    current_tape,
    exp,
    gather_rows,
    index_select,
    layer_norm,
    log,
    log_softmax,
    matmul,
    max_,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
    sqrt_scalar_divide,
    square,
    sub,
    sum_,
    transpose,
)
