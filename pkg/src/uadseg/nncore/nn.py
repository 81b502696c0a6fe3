"""Neural-network operations on Tensors: the layer set the autoencoder uses."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, ShapeError, as_tensor, _accumulate, matmul, reshape, transpose

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, parents=(x,))

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (g - dot))

    out._backward = backward
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then affine transform with gamma/beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.data.shape[-1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} vs feature dim ({n},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(gamma.data * xhat + beta.data, parents=(x, gamma, beta))

    def backward(g):
        if gamma.needs_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.needs_grad:
            _accumulate(beta, g.reshape(-1, n).sum(axis=0))
        if x.needs_grad:
            gx = g * gamma.data
            _accumulate(
                x,
                (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
                * inv_std,
            )

    out._backward = backward
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU; derivative at 0 is 0.5."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf, parents=(x,))

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accumulate(x, g * (cdf + x.data * pdf))

    out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0), parents=(x,))

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    out._backward = backward
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b), x shaped (..., in), w (in, out)."""
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out


def multi_head_attention(q, k, v, n_heads, wq, bq, wk, bk, wv, bv, wo, bo) -> Tensor:
    """Scaled dot-product attention over (N, T, E) inputs.

    Projections split E into n_heads; per head softmax(QK^T / sqrt(d_head)) V,
    heads concatenated and linearly projected back to E.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    n, t, e = q.data.shape
    if e % n_heads:
        raise ShapeError(f"attention: embed dim {e} not divisible by {n_heads} heads")
    dh = e // n_heads

    def split_heads(x):
        x = reshape(x, (n, x.data.shape[1], n_heads, dh))
        return transpose(x, (0, 2, 1, 3))  # (N, H, T, dh)

    qh = split_heads(linear(q, wq, bq))
    kh = split_heads(linear(k, wk, bk))
    vh = split_heads(linear(v, wv, bv))
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, vh)  # (N, H, T, dh)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (n, t, e))
    return linear(ctx, wo, bo)


def _im2col(xp: np.ndarray, kh: int, kw: int):
    """(N,C,Hp,Wp) -> contiguous (N, C*kh*kw, Ho*Wo) patch matrix."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N, C, Ho, Wo, kh, kw)
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "same") -> Tensor:
    """2D convolution (cross-correlation), stride 1, NCHW x OIHW.

    padding "same" keeps the spatial size (odd kernels); "valid" keeps only
    fully covered positions. Implemented as im2col + BLAS matmul; the patch
    matrix is rebuilt in backward instead of being cached.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4D input/weights, got {x.data.shape} and {w.data.shape}")
    n, c, h, wdt = x.data.shape
    co, ci, kh, kw = w.data.shape
    if ci != c:
        raise ShapeError(f"conv2d: input channels {c} vs weight channels {ci}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: same padding needs odd kernel, got {(kh, kw)}")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        if h < kh or wdt < kw:
            raise ShapeError(f"conv2d: input {(h, wdt)} smaller than kernel {(kh, kw)}")
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")

    def padded(arr):
        if ph or pw:
            return np.pad(arr, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        return arr

    if co == 1 and ci == 1 and (kh == 1 or kw == 1):
        return _conv2d_1d_single(x, w, b, padded, ph, pw)

    cols, ho, wo = _im2col(padded(x.data), kh, kw)
    w2 = w.data.reshape(co, c * kh * kw)
    y = (w2 @ cols).reshape(n, co, ho, wo)
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {b.data.shape} vs out channels ({co},)")
        y = y + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(y, parents=parents)

    def backward(g):
        g2 = g.reshape(n, co, ho * wo)
        if b is not None and b.needs_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.needs_grad:
            cols_again, _, _ = _im2col(padded(x.data), kh, kw)
            gw = np.matmul(g2, cols_again.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(w, gw.reshape(w.data.shape))
        if x.needs_grad:
            dcols = np.matmul(w2.T, g2)  # (N, C*kh*kw, L)
            dcols = dcols.reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros((n, c, h + 2 * ph, wdt + 2 * pw), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + ho, j : j + wo] += dcols[:, :, i, j]
            _accumulate(x, dxp[:, :, ph : ph + h, pw : pw + wdt])

    out._backward = backward
    return out


def _conv2d_1d_single(x: Tensor, w: Tensor, b, padded, ph, pw) -> Tensor:
    """Single-channel 1-D kernel convolution as a shifted weighted sum.

    Used by the separable SSIM blur; avoids the im2col copy entirely.
    """
    _, _, kh, kw = w.data.shape
    taps = w.data.ravel()
    xp = padded(x.data)
    n, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    y = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    for t in range(taps.size):
        i, j = (t, 0) if kw == 1 else (0, t)
        y += taps[t] * xp[:, :, i : i + ho, j : j + wo]
    if b is not None:
        y = y + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(y, parents=parents)

    def backward(g):
        if b is not None and b.needs_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.needs_grad:
            gw = np.empty_like(w.data).ravel()
            for t in range(taps.size):
                i, j = (t, 0) if kw == 1 else (0, t)
                gw[t] = float((g * xp[:, :, i : i + ho, j : j + wo]).sum())
            _accumulate(w, gw.reshape(w.data.shape))
        if x.needs_grad:
            dxp = np.zeros_like(xp)
            for t in range(taps.size):
                i, j = (t, 0) if kw == 1 else (0, t)
                dxp[:, :, i : i + ho, j : j + wo] += taps[t] * g
            h, wdt = x.data.shape[2:]
            _accumulate(x, dxp[:, :, ph : ph + h, pw : pw + wdt])

    out._backward = backward
    return out


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling of the last two axes."""
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"upsample_nearest2: need >=2 dims, got {x.data.shape}")
    out = Tensor(x.data.repeat(2, axis=-2).repeat(2, axis=-1), parents=(x,))
    *lead, h, w = x.data.shape

    def backward(g):
        _accumulate(x, g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)))

    out._backward = backward
    return out
