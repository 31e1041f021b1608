"""Differentiable layer operations over NCHW tensors.

Convolutions are lowered to a single GEMM over an im2col buffer laid out as
``(c_in * k_h * k_w, n * h_out * w_out)``.  Pooling and bilinear resampling are
separable, so they are expressed as a pair of small per-axis matrices applied
with ``einsum``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, make_result


@dataclass
class Conv2dParams:
    weight: Tensor  # (c_out, c_in, k_h, k_w)
    bias: Tensor  # (c_out,)
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv bias shape {self.bias.shape} does not match c_out={self.weight.shape[0]}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ContractError("stride and dilation must be >= 1, padding >= 0")


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True

    def __post_init__(self):
        if self.eps <= 0 or not 0.0 <= self.momentum <= 1.0:
            raise ContractError("batch norm needs eps > 0 and momentum in [0, 1]")

    @classmethod
    def fresh(cls, channels: int, **kw) -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(channels, np.float32), requires_grad=True),
            beta=Tensor(np.zeros(channels, np.float32), requires_grad=True),
            running_mean=np.zeros(channels, np.float32),
            running_var=np.ones(channels, np.float32),
            **kw,
        )


def _check_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects an NCHW tensor, got shape {x.shape}")


def _out_size(size: int, k: int, stride: int, pad: int, dil: int) -> int:
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dil: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        r0 = i * dil
        for j in range(kw):
            c0 = j * dil
            patch = xp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, ho: int, wo: int, stride: int, dil: int) -> np.ndarray:
    n, c, hp, wp = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        r0 = i * dil
        for j in range(kw):
            c0 = j * dil
            out[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += cols[
                :, i, j
            ].transpose(1, 0, 2, 3)
    return out


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    _check_rank4(x, "conv2d")
    w, b = p.weight, p.bias
    c_out, c_in, kh, kw = w.shape
    n, c, h, wd = x.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {c_in}")
    s, pad, d = p.stride, p.padding, p.dilation
    if d * (kh - 1) + 1 > h + 2 * pad or d * (kw - 1) + 1 > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel extent exceeds padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho, wo = _out_size(h, kh, s, pad, d), _out_size(wd, kw, s, pad, d)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, ho, wo, s, d)
    w2 = w.data.reshape(c_out, -1)
    # one GEMM per sample, so a sample's output does not depend on its batch position
    out = np.matmul(w2, cols.reshape(w2.shape[1], n, ho * wo).transpose(1, 0, 2)).reshape(n, c_out, ho, wo)
    out = out + b.data.reshape(1, -1, 1, 1)
    xp_shape = xp.shape

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gx = gw = gb = None
        if x.requires_grad:
            dxp = _col2im(w2.T @ g2, xp_shape, kh, kw, ho, wo, s, d)
            gx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if b.requires_grad:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    return make_result(np.ascontiguousarray(out), (x, w, b), backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution, weight laid out ``(c_in, c_out, k_h, k_w)``.

    Output spatial size is ``(h - 1) * stride + k``; this is the adjoint of
    :func:`conv2d` with the same weight and stride and no padding.
    """
    _check_rank4(x, "conv_transpose2d")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d weight must be rank 4, got {weight.shape}")
    c_in, c_out, kh, kw = weight.shape
    n, c, h, wd = x.shape
    if c != c_in:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} does not match c_out={c_out}")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    ho, wo = (h - 1) * stride + kh, (wd - 1) * stride + kw
    w2 = weight.data.reshape(c_in, -1)
    xm = x.data.transpose(1, 0, 2, 3).reshape(c_in, -1)
    cols = np.matmul(w2.T, x.data.reshape(n, c_in, h * wd)).transpose(1, 0, 2).reshape(-1, n * h * wd)
    out = _col2im(cols, (n, c_out, ho, wo), kh, kw, h, wd, stride, 1)
    out += bias.data.reshape(1, -1, 1, 1).astype(out.dtype)

    def backward(g):
        gcols = _im2col(g, kh, kw, h, wd, stride, 1)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (w2 @ gcols).reshape(c_in, n, h, wd).transpose(1, 0, 2, 3)
        if weight.requires_grad:
            gw = (xm @ gcols.T).reshape(weight.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward, "conv_transpose2d")


def batch_norm2d(x: Tensor, p: BatchNormParams) -> Tensor:
    _check_rank4(x, "batch_norm2d")
    c = x.shape[1]
    if p.gamma.shape != (c,) or p.beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: parameters sized {p.gamma.shape[0]}, input has {c} channels")
    gamma = p.gamma.data.reshape(1, c, 1, 1)
    beta = p.beta.data.reshape(1, c, 1, 1)
    xd = x.data

    if p.training:
        mean = xd.mean(axis=(0, 2, 3), keepdims=True)
        var = ((xd - mean) ** 2).mean(axis=(0, 2, 3), keepdims=True)
        m = p.momentum
        rm_dtype = p.running_mean.dtype
        p.running_mean = ((1 - m) * p.running_mean + m * mean.reshape(c)).astype(rm_dtype)
        p.running_var = ((1 - m) * p.running_var + m * var.reshape(c)).astype(rm_dtype)
    else:
        mean = p.running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        var = p.running_var.reshape(1, c, 1, 1).astype(xd.dtype)

    inv_std = 1.0 / np.sqrt(var + xd.dtype.type(p.eps))
    xhat = (xd - mean) * inv_std
    out = gamma * xhat + beta
    training = p.training
    count = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def backward(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gamma
            if training:
                gx = (
                    inv_std
                    / count
                    * (
                        count * gxhat
                        - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    )
                )
            else:
                gx = gxhat * inv_std
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if p.gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if p.beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_result(out, (x, p.gamma, p.beta), backward, "batch_norm2d")


def _relu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.maximum(xd, 0), (x,), lambda g: (_relu_backward(g, xd),), "relu")


_F32_OPEN = (np.nextafter(np.float32(0), np.float32(1)), np.nextafter(np.float32(1), np.float32(0)))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # exp of a non-positive argument only, so no overflow warnings
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype)
    if s.dtype == np.float32:
        # keep outputs strictly inside (0, 1) even where float32 saturates
        s = np.clip(s, *_F32_OPEN)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first element in row-major order."""
    _check_rank4(x, "max_pool2d")
    if k != stride:
        raise ContractError("only non-overlapping pooling (k == stride) is supported")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: spatial size {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_result(out, (x,), backward, "max_pool2d")


def adaptive_bin_edges(size: int, bins: int) -> list[tuple[int, int]]:
    """Row ranges ``[floor(i*size/bins), ceil((i+1)*size/bins))`` for each bin."""
    return [((i * size) // bins, -((-(i + 1) * size) // bins)) for i in range(bins)]


def _pool_matrix(size: int, bins: int) -> np.ndarray:
    m = np.zeros((bins, size), dtype=np.float64)
    for i, (lo, hi) in enumerate(adaptive_bin_edges(size, bins)):
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def _separable(x: Tensor, mh: np.ndarray, mw: np.ndarray, op: str) -> Tensor:
    mh = mh.astype(x.data.dtype)
    mw = mw.astype(x.data.dtype)
    # stacked matmuls keep every (n, c) slice on an identically shaped GEMM
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return make_result(out, (x,), backward, op)


def adaptive_avg_pool2d(x: Tensor, bins: Sequence[int]) -> Tensor:
    _check_rank4(x, "adaptive_avg_pool2d")
    bh, bw = bins
    h, w = x.shape[2:]
    if not (1 <= bh <= h and 1 <= bw <= w):
        raise ShapeError(f"adaptive_avg_pool2d: bins {bh}x{bw} exceed input {h}x{w}")
    # mean over a rectangle factorises into a row mean followed by a column mean
    return _separable(x, _pool_matrix(h, bh), _pool_matrix(w, bw), "adaptive_avg_pool2d")


def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    m = np.zeros((dst, src), dtype=np.float64)
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    rows = np.arange(dst)
    np.add.at(m, (rows, i0), 1 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def upsample_bilinear(x: Tensor, out: Sequence[int]) -> Tensor:
    """Half-pixel bilinear upsampling with edge clamping."""
    _check_rank4(x, "upsample_bilinear")
    ho, wo = out
    h, w = x.shape[2:]
    if ho < h or wo < w:
        raise ContractError(f"upsample_bilinear cannot downscale {h}x{w} to {ho}x{wo}")
    return _separable(x, _bilinear_matrix(h, ho), _bilinear_matrix(w, wo), "upsample_bilinear")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ContractError("concat_channels needs at least one tensor")
    for t in xs:
        _check_rank4(t, "concat_channels")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {t.shape} does not match n,h,w of {xs[0].shape}")
    if len(xs) == 1:
        return xs[0]
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=1)
    return make_result(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=1)), "concat")


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)
