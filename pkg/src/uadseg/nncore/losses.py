"""Reconstruction losses: MSE and windowed SSIM (both differentiable)."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, ShapeError, as_tensor, reshape
from .nn import conv2d

SSIM_WINDOW_SIZE = 11
SSIM_WINDOW_SIGMA = 1.5


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of (pred - target)^2."""
    pred, target = as_tensor(pred), as_tensor(target, like=pred)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse_loss: shapes {pred.data.shape} vs {target.data.shape}")
    diff = pred - target
    return (diff * diff).mean()


def gaussian_window(size: int = SSIM_WINDOW_SIZE, sigma: float = SSIM_WINDOW_SIGMA, dtype=np.float32):
    """Normalized 2D Gaussian window, shape (1, 1, size, size)."""
    half = size // 2
    coords = np.arange(size, dtype=np.float64) - half
    g1 = np.exp(-(coords**2) / (2.0 * sigma**2))
    g2 = np.outer(g1, g1)
    g2 /= g2.sum()
    return g2.reshape(1, 1, size, size).astype(dtype)


def _gaussian_1d(size, sigma, dtype):
    half = size // 2
    coords = np.arange(size, dtype=np.float64) - half
    g1 = np.exp(-(coords**2) / (2.0 * sigma**2))
    g1 /= g1.sum()
    return g1.astype(dtype)


def ssim(
    pred: Tensor,
    target: Tensor,
    data_range: float,
    window_size: int = SSIM_WINDOW_SIZE,
    sigma: float = SSIM_WINDOW_SIGMA,
) -> Tensor:
    """Mean SSIM with local Gaussian statistics over valid window positions.

    Inputs are (N, C, H, W) or (H, W); channels are treated as independent
    single-channel images and averaged. C1 = (0.01*data_range)^2,
    C2 = (0.03*data_range)^2.
    """
    pred, target = as_tensor(pred), as_tensor(target, like=pred)
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"ssim: shapes {pred.data.shape} vs {target.data.shape}")
    if pred.data.ndim == 2:
        pred = reshape(pred, (1, 1) + pred.data.shape)
        target = reshape(target, (1, 1) + target.data.shape)
    if pred.data.ndim != 4:
        raise ShapeError(f"ssim: need (N,C,H,W) or (H,W), got {pred.data.shape}")
    n, c, h, w = pred.data.shape
    if h < window_size or w < window_size:
        raise ShapeError(f"ssim: image {(h, w)} smaller than window {window_size}")

    x = reshape(pred, (n * c, 1, h, w))
    y = reshape(target, (n * c, 1, h, w))
    # the Gaussian window is rank-1, so blur with two 1-D passes
    g1 = _gaussian_1d(window_size, sigma, pred.data.dtype)
    win_v = Tensor(g1.reshape(1, 1, window_size, 1))
    win_h = Tensor(g1.reshape(1, 1, 1, window_size))

    def blur(t):
        return conv2d(conv2d(t, win_v, padding="valid"), win_h, padding="valid")

    mu_x = blur(x)
    mu_y = blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    numerator = (2.0 * (mu_x * mu_y) + c1) * (2.0 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (numerator / denominator).mean()


def ssim_loss(pred: Tensor, target: Tensor, data_range: float, **kwargs) -> Tensor:
    """1 - SSIM(pred, target)."""
    return 1.0 - ssim(pred, target, data_range, **kwargs)
