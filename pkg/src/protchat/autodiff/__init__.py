from .checkpoint import decode_tensors, encode_tensors, load_checkpoint, save_checkpoint
from .optim import AdamW, AdamWState, adamw_step, cosine_lr
from .tensor import (
    Tape,
    Tensor,
    backward,
    cross_entropy_logits,
    default_dtype,
    layer_norm,
    matmul,
    sigmoid,
    softmax,
    softmax_rows,
)

__all__ = [
    "AdamW",
    "AdamWState",
    "Tape",
    "Tensor",
    "adamw_step",
    "backward",
    "cosine_lr",
    "cross_entropy_logits",
    "decode_tensors",
    "default_dtype",
    "encode_tensors",
    "layer_norm",
    "load_checkpoint",
    "matmul",
    "save_checkpoint",
    "sigmoid",
    "softmax",
    "softmax_rows",
]
