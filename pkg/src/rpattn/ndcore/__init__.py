"""Dense tensors with reverse-mode autodiff."""
from . import archive, ops
from .gradcheck import gradcheck
from .nn import Conv2d, Linear, LSTMCell, Module, lstm_step, param, run_lstm
from .ops import (
    bce_with_logits,
    concat,
    conv2d,
    cosine_similarity,
    log_softmax,
    logsumexp,
    masked_fill,
    max_pool2d,
    softmax,
    stack,
    upsample_nearest,
)
from .optim import Adam
from .rng import RngStream
from .tensor import Tensor, as_tensor, backward, default_dtype, no_grad, precision

__all__ = [
    "Adam", "Conv2d", "Linear", "LSTMCell", "Module", "RngStream", "Tensor",
    "archive", "as_tensor", "backward", "bce_with_logits", "concat", "conv2d",
    "cosine_similarity", "default_dtype", "gradcheck", "log_softmax", "logsumexp",
    "lstm_step", "masked_fill", "max_pool2d", "no_grad", "ops", "param", "precision",
    "run_lstm", "softmax", "stack", "upsample_nearest",
]
