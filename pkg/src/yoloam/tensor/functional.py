"""Convolution, pooling, normalization and resampling ops on :class:`Tensor`."""

from __future__ import annotations

import numpy as np

from . import kernels
from .core import Tensor, _make, reshape, tmax


def conv_out_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``weight[Cout,Cin,k,k]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    kh, kw = weight.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel must be odd, got {kh}x{kw}")
    return _conv2d(x, weight, bias, stride, stride, padding, padding)


def _conv2d(x, weight, bias, sh, sw, ph, pw) -> Tensor:
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels but weight expects {wcin} (weight {weight.shape})")
    oh, ow = conv_out_size(h, kh, sh, ph), conv_out_size(w, kw, sw, pw)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw} with padding ({ph},{pw})")
    xd, wd = x.data, weight.data
    wmat = wd.reshape(cout, cin * kh * kw)
    pointwise = kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0
    if pointwise:
        cols = xd.reshape(n, cin, h * w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
        cols = kernels.im2col(xp, kh, kw, sh, sw, oh, ow)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, oh, ow)

    def bw(g):
        g3 = g.reshape(n, cout, oh * ow)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3)
            if pointwise:
                gx = gcols.reshape(xd.shape)
            else:
                gxp = kernels.col2im(gcols, cin, h + 2 * ph, w + 2 * pw, kh, kw, sh, sw, oh, ow)
                gx = gxp[:, :, ph : ph + h, pw : pw + w]
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def conv1d(x: Tensor, weight: Tensor, padding: int | None = None) -> Tensor:
    """Same-length 1-d convolution of ``x[N,1,L]`` with ``weight[1,1,k]``, k odd."""
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError(f"conv1d expects 3-d input and weight, got {x.shape} and {weight.shape}")
    k = weight.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"conv1d kernel size must be odd, got {k}")
    p = (k - 1) // 2 if padding is None else padding
    n, cin, length = x.shape
    out = _conv2d(
        reshape(x, (n, cin, 1, length)),
        reshape(weight, (weight.shape[0], weight.shape[1], 1, k)),
        None,
        1,
        1,
        0,
        p,
    )
    return reshape(out, (n, out.shape[1], out.shape[3]))


def gap(x: Tensor) -> Tensor:
    """Global average pooling: [N,C,H,W] -> [N,C,1,1]."""
    return x.mean(axis=(2, 3), keepdims=True)


def gmp(x: Tensor) -> Tensor:
    """Global max pooling: [N,C,H,W] -> [N,C,1,1]."""
    n, c, h, w = x.shape
    return reshape(tmax(reshape(x, (n, c, h * w)), axis=2, keepdims=True), (n, c, 1, 1))


def maxpool2d(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    n, c, h, w = x.shape
    oh, ow = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"maxpool2d: input {h}x{w} too small for k={k}")
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    out, arg = kernels.maxpool_forward(xd, k, stride, oh, ow)

    def bw(g):
        gp = kernels.maxpool_backward(g, arg, h + 2 * padding, w + 2 * padding, k, stride)
        return (gp[:, :, padding : padding + h, padding : padding + w],)

    return _make(out, (x,), bw, "maxpool2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.03,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization; updates running stats in place when training."""
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ValueError(f"batchnorm2d: {c} channels but affine of shape {gamma.shape}")
    xd = x.data
    g_, b_ = gamma.data, beta.data
    if training:
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3))
        xc = xd - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv[None, :, None, None]
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        inv = 1.0 / np.sqrt(running_var.astype(xd.dtype) + eps)
        xhat = (xd - running_mean.astype(xd.dtype)[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * g_[None, :, None, None] + b_[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * g_[None, :, None, None]
            if training:
                s1 = gxhat.mean(axis=(0, 2, 3))[None, :, None, None]
                s2 = (gxhat * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
                gx = (gxhat - s1 - xhat * s2) * inv[None, :, None, None]
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "batchnorm2d")


def groupnorm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, group) over its channels and positions, then per-channel affine."""
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"groupnorm: {groups} groups do not divide {c} channels")
    xd = x.data.reshape(n, groups, -1)
    mu = xd.mean(axis=2, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    g_, b_ = gamma.data[None, :, None, None], beta.data[None, :, None, None]
    out = xhat * g_ + b_

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = (g * g_).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            s1 = gxhat.mean(axis=2, keepdims=True)
            s2 = (gxhat * xh).mean(axis=2, keepdims=True)
            gx = ((gxhat - s1 - xh * s2) * inv).reshape(n, c, h, w)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "groupnorm")
