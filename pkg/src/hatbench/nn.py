"""Convolution, normalization, activations, pooling and the 4x MLP."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigError, DimensionError, StateError
from .params import ParamFactory
from .tensor import Tensor, add_macs, any_meta, mac_tag, matmul, record, sqrt

NORM_KINDS = ("batchnorm", "layernorm_lastdim", "layernorm_2d")


@dataclass
class Conv2dParams:
    weight: Tensor  # (C_out, C_in, kh, kw)
    bias: Tensor | None = None
    stride: int = field(default=1, metadata={"skip": True})
    padding: int = field(default=0, metadata={"skip": True})

    @classmethod
    def init(cls, pf: ParamFactory, c_in: int, c_out: int, kernel: int = 3,
             stride: int = 1, padding: int | None = None, bias: bool = True):
        return cls(weight=pf.fan_out_normal((c_out, c_in, kernel, kernel)),
                   bias=pf.zeros((c_out,)) if bias else None,
                   stride=stride, padding=kernel // 2 if padding is None else padding)


@dataclass
class NormParams:
    scale: Tensor
    shift: Tensor
    eps: float = field(default=1e-5, metadata={"skip": True})
    kind: str = field(default="layernorm_lastdim", metadata={"skip": True})
    running_mean: Tensor | None = None
    running_var: Tensor | None = None

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ConfigError(f"unknown norm kind {self.kind!r}", "norm_kind")
        if self.eps <= 0:
            raise ConfigError("norm eps must be positive", "eps_positive")
        if self.scale.shape != self.shift.shape:
            raise DimensionError(f"norm scale {self.scale.shape} vs shift {self.shift.shape}")

    @classmethod
    def init(cls, pf: ParamFactory, channels: int, kind: str = "layernorm_lastdim",
             eps: float = 1e-5):
        stats = kind == "batchnorm"
        return cls(scale=pf.ones((channels,)), shift=pf.zeros((channels,)), eps=eps, kind=kind,
                   running_mean=pf.buffer((channels,), 0.0) if stats else None,
                   running_var=pf.buffer((channels,), 1.0) if stats else None)


@dataclass
class MlpParams:
    w1: Tensor  # (d, 4d)
    b1: Tensor
    w2: Tensor  # (4d, d)
    b2: Tensor

    def __post_init__(self):
        d, hidden = self.w1.shape
        if hidden != 4 * d or self.w2.shape != (hidden, d):
            raise DimensionError(
                f"MLP must be d->4d->d, got w1 {self.w1.shape}, w2 {self.w2.shape}")

    @classmethod
    def init(cls, pf: ParamFactory, d: int):
        return cls(w1=pf.trunc_normal((d, 4 * d)), b1=pf.zeros((4 * d,)),
                   w2=pf.trunc_normal((4 * d, d)), b2=pf.zeros((d,)))


# ---------------------------------------------------------------- conv


def conv_out_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation via im2col. Counts B*C_out*H'*W'*C_in*kh*kw MACs."""
    w, b = p.weight, p.bias
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = w.shape
    if C != Ci:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    s, pad = p.stride, p.padding
    Ho, Wo = conv_out_size(H, kh, s, pad), conv_out_size(W, kw, s, pad)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"input {x.shape} too small for kernel {kh}x{kw} pad {pad}")
    with mac_tag("conv"):
        add_macs(B * Co * Ho * Wo * Ci * kh * kw)
    shape = (B, Co, Ho, Wo)
    inputs = (x, w) if b is None else (x, w, b)
    if any_meta(*inputs):
        return Tensor.meta(shape, x.dtype)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wm = w.data.reshape(Co, -1)
    out = (cols @ wm.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[:, None, None]

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wm).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape, x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + H, pad:pad + W]
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)) if b.requires_grad else None,)
        return grads

    return record(out, shape, x.dtype, inputs, bw)


# ---------------------------------------------------------------- norms


def _channel_view(t: Tensor, x: Tensor, axis: int) -> Tensor:
    # (C,) -> (C, 1, ..., 1) expanded to the trailing shape of x from `axis`
    trailing = x.shape[axis:]
    return t.reshape((t.shape[0],) + (1,) * (len(trailing) - 1)).expand(trailing)


def batchnorm(x: Tensor, p: NormParams) -> Tensor:
    """Inference-mode batch norm over axis 1 using stored running statistics."""
    if p.running_mean is None or p.running_var is None:
        raise StateError("batchnorm needs running_mean/running_var for inference")
    C = x.shape[1]
    if p.scale.shape != (C,):
        raise DimensionError(f"batchnorm params for {p.scale.shape[0]} channels, input {x.shape}")
    inv_std = 1.0 / sqrt(p.running_var + p.eps)
    a = p.scale * inv_std
    b = p.shift - p.running_mean * a
    return x * _channel_view(a, x, 1) + _channel_view(b, x, 1)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float, axis: int = -1) -> Tensor:
    """Normalize over one axis to zero mean / unit variance, then per-channel affine."""
    ax = axis % x.ndim
    C = x.shape[ax]
    if scale.shape != (C,) or shift.shape != (C,):
        raise DimensionError(f"layer norm over axis {ax} of {x.shape} needs ({C},) params, "
                             f"got {scale.shape}")
    inputs = (x, scale, shift)
    if any_meta(*inputs):
        return Tensor.meta(x.shape, x.dtype)
    bshape = [1] * x.ndim
    bshape[ax] = C
    s = scale.data.reshape(bshape)
    xd = x.data
    mu = xd.mean(axis=ax, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=ax, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * s + shift.data.reshape(bshape)
    others = tuple(i for i in range(x.ndim) if i != ax)

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * s
            gx = inv * (dxhat - dxhat.mean(axis=ax, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=ax, keepdims=True))
        gs = (g * xhat).sum(axis=others) if scale.requires_grad else None
        gb = g.sum(axis=others) if shift.requires_grad else None
        return gx, gs, gb

    return record(out, x.shape, x.dtype, inputs, bw)


def layernorm(x: Tensor, p: NormParams) -> Tensor:
    return layer_norm(x, p.scale, p.shift, p.eps, axis=-1)


def layernorm_2d(x: Tensor, p: NormParams) -> Tensor:
    """Per-position normalization across channels of a (B, C, H, W) map."""
    if x.ndim != 4:
        raise DimensionError(f"layernorm_2d expects (B,C,H,W), got {x.shape}")
    return layer_norm(x, p.scale, p.shift, p.eps, axis=1)


def norm(x: Tensor, p: NormParams) -> Tensor:
    if p.kind == "batchnorm":
        return batchnorm(x, p)
    if p.kind == "layernorm_2d":
        return layernorm_2d(x, p)
    return layernorm(x, p)


# ---------------------------------------------------------------- activations

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x)."""
    if x.data is None:
        return Tensor.meta(x.shape, x.dtype)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def bw(g):
        return (g * (cdf + x.data * np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI),)

    return record(out.astype(x.dtype, copy=False), x.shape, x.dtype, (x,), bw)


def relu(x: Tensor) -> Tensor:
    if x.data is None:
        return Tensor.meta(x.shape, x.dtype)
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype), x.shape, x.dtype, (x,),
                  lambda g: (g * mask,))


# ---------------------------------------------------------------- pooling


def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages input bins [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out)).

    When n_out divides n_in the bins are the disjoint equal blocks.
    """
    P = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        P[i, lo:hi] = 1.0 / (hi - lo)
    return P


def upsample_index(n_in: int, n_out: int) -> np.ndarray:
    """Nearest source cell for every output cell: floor(i * n_in / n_out)."""
    return (np.arange(n_out) * n_in) // n_out


def _along(mat: np.ndarray, arr: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(mat, arr, axes=([1], [axis])), 0, axis)


def adaptive_avgpool(x: Tensor, out, axes=(2, 3)) -> Tensor:
    """Average-pool the two spatial axes down to ``out`` (int or pair)."""
    oh, ow = _pair(out)
    ah, aw = (a % x.ndim for a in axes)
    H, W = x.shape[ah], x.shape[aw]
    if not (1 <= oh <= H and 1 <= ow <= W):
        raise ConfigError(f"cannot pool {H}x{W} to {oh}x{ow}", "pool_size")
    shape = list(x.shape)
    shape[ah], shape[aw] = oh, ow
    shape = tuple(shape)
    if x.data is None:
        return Tensor.meta(shape, x.dtype)
    Ph = pool_matrix(H, oh).astype(x.dtype)
    Pw = pool_matrix(W, ow).astype(x.dtype)
    out_arr = _along(Pw, _along(Ph, x.data, ah), aw)
    return record(out_arr, shape, x.dtype, (x,),
                  lambda g: (_along(Pw.T, _along(Ph.T, g, ah), aw),))


def upsample_nearest(x: Tensor, out, axes=(2, 3)) -> Tensor:
    """Nearest-neighbour upsampling of the two spatial axes to ``out``."""
    oh, ow = _pair(out)
    ah, aw = (a % x.ndim for a in axes)
    H, W = x.shape[ah], x.shape[aw]
    if oh < H or ow < W:
        raise ConfigError(f"cannot upsample {H}x{W} to {oh}x{ow}", "upsample_size")
    shape = list(x.shape)
    shape[ah], shape[aw] = oh, ow
    shape = tuple(shape)
    if x.data is None:
        return Tensor.meta(shape, x.dtype)
    ih, iw = upsample_index(H, oh), upsample_index(W, ow)
    out_arr = np.take(np.take(x.data, ih, axis=ah), iw, axis=aw)
    Uh = np.zeros((oh, H), x.dtype)
    Uh[np.arange(oh), ih] = 1
    Uw = np.zeros((ow, W), x.dtype)
    Uw[np.arange(ow), iw] = 1
    return record(out_arr, shape, x.dtype, (x,),
                  lambda g: (_along(Uw.T, _along(Uh.T, g, ah), aw),))


# ---------------------------------------------------------------- linear / MLP


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


def mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    """w2 . gelu(w1 . x + b1) + b2 over the trailing dim."""
    d = p.w1.shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"MLP expects trailing dim {d}, got {x.shape}")
    with mac_tag("mlp"):
        return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2)
