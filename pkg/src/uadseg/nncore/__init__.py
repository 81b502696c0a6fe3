"""Minimal dense-tensor library with reverse-mode autodiff.

Numpy arrays carry the data; a micrograd-style tape of backward closures
carries the gradients. Only the layer set the autoencoder needs is
implemented: linear, layer norm, softmax, GELU, multi-head attention,
2D convolution, nearest upsampling, plus MSE/SSIM losses and Adam.
"""

from .tensor import Tensor, ShapeError, as_tensor, parameter, concat, matmul, reshape, transpose
from .nn import (
    softmax,
    layer_norm,
    gelu,
    relu,
    linear,
    multi_head_attention,
    conv2d,
    upsample_nearest2,
)
from .losses import mse_loss, ssim, ssim_loss, gaussian_window
from .optim import AdamState, init_adam, adam_step

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "parameter",
    "concat",
    "matmul",
    "reshape",
    "transpose",
    "softmax",
    "layer_norm",
    "gelu",
    "relu",
    "linear",
    "multi_head_attention",
    "conv2d",
    "upsample_nearest2",
    "mse_loss",
    "ssim",
    "ssim_loss",
    "gaussian_window",
    "AdamState",
    "init_adam",
    "adam_step",
]
