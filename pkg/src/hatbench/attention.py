"""Multi-head self-attention, positional-bias MLPs and baseline attention patterns."""
from __future__ import annotations

import hashlib
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import MlpParams, NormParams, adaptive_avgpool, gelu, layernorm, linear, mlp_forward
from .params import ParamFactory
from .tensor import Tensor, current_tape, mac_tag, matmul, softmax, take
from .windows import check_window, window_merge, window_partition

_local = threading.local()


@contextmanager
def capture_attention():
    """Collect every attention-probability array computed inside the block."""
    maps: list[np.ndarray] = []
    stack = getattr(_local, "captures", None)
    if stack is None:
        stack = _local.captures = []
    stack.append(maps)
    try:
        yield maps
    finally:
        stack.remove(maps)


def _capture(attn: Tensor) -> None:
    for maps in getattr(_local, "captures", None) or ():
        maps.append(None if attn.data is None else attn.data.copy())


# ---------------------------------------------------------------- params


@dataclass
class MhsaParams:
    """Q/K/V/O projections. Keys carry no bias: a key bias shifts every score in
    a softmax row equally and so never affects the output."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int = field(default=1, metadata={"skip": True})

    def __post_init__(self):
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d={self.d}", "heads_divide_d")

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @classmethod
    def init(cls, pf: ParamFactory, d: int, heads: int):
        return cls(wq=pf.trunc_normal((d, d)), bq=pf.zeros((d,)),
                   wk=pf.trunc_normal((d, d)),
                   wv=pf.trunc_normal((d, d)), bv=pf.zeros((d,)),
                   wo=pf.trunc_normal((d, d)), bo=pf.zeros((d,)), heads=heads)


def _digest(*ts: Tensor) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for t in ts:
        h.update(t.data.tobytes())
    return h.digest()


@dataclass
class RelBiasMlp:
    """2 -> hidden -> heads MLP over log-spaced relative offsets, with a table cache.

    The cache maps a token geometry to its bias table. Each entry remembers a
    digest of the weights it was computed from, so perturbing the weights
    (e.g. during a finite-difference check) invalidates it.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor  # no output bias: a per-head constant cancels in the softmax
    cache: dict = field(default_factory=dict, repr=False, compare=False,
                        metadata={"skip": True})
    hits: int = field(default=0, compare=False, metadata={"skip": True})
    misses: int = field(default=0, compare=False, metadata={"skip": True})
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False,
                                  compare=False, metadata={"skip": True})

    @property
    def heads(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def init(cls, pf: ParamFactory, heads: int, hidden: int = 32):
        return cls(w1=pf.trunc_normal((2, hidden), std=1.0), b1=pf.zeros((hidden,)),
                   w2=pf.trunc_normal((hidden, heads)))

    def clear_cache(self) -> None:
        with self._lock:
            self.cache.clear()
            self.hits = self.misses = 0


@dataclass
class AbsBiasMlp:
    """2 -> hidden -> d MLP embedding normalized absolute coordinates."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, pf: ParamFactory, d: int, hidden: int = 32):
        return cls(w1=pf.trunc_normal((2, hidden), std=1.0), b1=pf.zeros((hidden,)),
                   w2=pf.trunc_normal((hidden, d)), b2=pf.zeros((d,)))


@dataclass
class LayerScale:
    gamma1: Tensor
    gamma2: Tensor

    @classmethod
    def init(cls, pf: ParamFactory, d: int, value: float = 1e-5):
        return cls(gamma1=pf.constant((d,), value), gamma2=pf.constant((d,), value))


@dataclass
class AttnBlockParams:
    """Pre-norm transformer block: x += g1*MHSA(LN(x)); x += g2*MLP(LN(x))."""

    norm1: NormParams
    attn: MhsaParams
    norm2: NormParams
    mlp: MlpParams
    ls: LayerScale | None = None
    rel_bias: RelBiasMlp | None = None

    @classmethod
    def init(cls, pf: ParamFactory, d: int, heads: int, layerscale: float | None = 1e-5,
             rel_bias: bool = True, bias_hidden: int = 32, eps: float = 1e-5):
        return cls(norm1=NormParams.init(pf, d, eps=eps), attn=MhsaParams.init(pf, d, heads),
                   norm2=NormParams.init(pf, d, eps=eps), mlp=MlpParams.init(pf, d),
                   ls=LayerScale.init(pf, d, layerscale) if layerscale is not None else None,
                   rel_bias=RelBiasMlp.init(pf, heads, bias_hidden) if rel_bias else None)


# ---------------------------------------------------------------- coordinates


def grid_coords(h: int, w: int | None = None) -> np.ndarray:
    """(h*w, 2) integer (row, col) coordinates in raster order."""
    w = h if w is None else w
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([r.ravel(), c.ravel()], axis=1).astype(np.float64)


def normalize_coords(coords: np.ndarray, extent: int) -> np.ndarray:
    """Map coordinates in [0, extent-1] linearly onto [-1, 1]."""
    if extent <= 1:
        return np.zeros_like(coords, dtype=np.float64)
    return np.asarray(coords, np.float64) / (extent - 1) * 2.0 - 1.0


def log_offsets(coords: np.ndarray) -> np.ndarray:
    """(T, T, 2) array of sign(d) * log2(1 + |d|) for d = coord_i - coord_j."""
    coords = np.asarray(coords, np.float64)
    delta = coords[:, None, :] - coords[None, :, :]
    return np.sign(delta) * np.log2(1.0 + np.abs(delta))


def distinct_offsets(coords: np.ndarray) -> int:
    """Number of distinct pairwise offsets ``coords[i] - coords[j]``.

    A full Cartesian grid is handled per axis without forming all T^2 pairs.
    """
    coords = np.asarray(coords, np.float64)
    xs, ys = np.unique(coords[:, 0]), np.unique(coords[:, 1])
    if len(xs) * len(ys) == len(np.unique(coords, axis=0)) == len(coords):
        return len(np.unique(xs[:, None] - xs)) * len(np.unique(ys[:, None] - ys))
    delta = coords[:, None, :] - coords[None, :, :]
    return len(np.unique(delta.reshape(-1, 2), axis=0))


# ---------------------------------------------------------------- bias MLPs


def _bias_mlp(feat: Tensor, w1, b1, w2, b2=None) -> Tensor:
    return linear(gelu(linear(feat, w1, b1)), w2, b2)


def relbias_table(p: RelBiasMlp, coords: np.ndarray) -> Tensor:
    """(heads, T, T) relative-position bias for tokens at ``coords``.

    The MLP runs once per distinct offset; pairs with equal offsets gather the
    same row, so their entries are bit-identical. Outside a gradient tape the
    table is served from the cache when the geometry and weights match.
    """
    coords = np.asarray(coords, np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(f"coords must be (T, 2), got {coords.shape}")
    T = coords.shape[0]
    weights = (p.w1, p.b1, p.w2)
    meta = any(w.data is None for w in weights)
    tape = current_tape()
    use_cache = not meta and not (tape is not None and any(w.requires_grad for w in weights))
    key = (T, coords.tobytes())
    digest = _digest(*weights) if use_cache else None
    if use_cache:
        with p._lock:
            hit = p.cache.get(key)
            if hit is not None and hit[0] == digest:
                p.hits += 1
                return hit[1]
    if meta:
        # only the MAC count matters: run the MLP on a meta batch of U rows
        with mac_tag("posbias"):
            vals = _bias_mlp(Tensor.meta((distinct_offsets(coords), 2), p.w1.dtype), *weights)
        return Tensor.meta((vals.shape[1], T, T), vals.dtype)
    feat = log_offsets(coords).reshape(-1, 2)
    uniq, inv = np.unique(feat, axis=0, return_inverse=True)
    with mac_tag("posbias"):
        vals = _bias_mlp(Tensor(uniq, dtype=p.w1.dtype), *weights)  # (U, heads)
    table = take(vals, inv.reshape(T, T), axis=0).permute(2, 0, 1)
    if use_cache:
        with p._lock:
            p.misses += 1
            p.cache[key] = (digest, table)
    return table


def abs_bias(p: AbsBiasMlp, coords: np.ndarray) -> Tensor:
    """(T, d) absolute positional embedding for normalized coordinates."""
    with mac_tag("posbias"):
        return _bias_mlp(Tensor(np.asarray(coords, np.float64), dtype=p.w1.dtype),
                         p.w1, p.b1, p.w2, p.b2)


# ---------------------------------------------------------------- attention core


def _heads(t: Tensor, heads: int) -> Tensor:
    B, T, d = t.shape
    return t.reshape(B, T, heads, d // heads).permute(0, 2, 1, 3)


def attention(xq: Tensor, xkv: Tensor, p: MhsaParams, bias: Tensor | None = None) -> Tensor:
    """Queries from ``xq`` (B,Tq,d) attend to keys/values from ``xkv`` (B,Tk,d)."""
    if xq.ndim != 3 or xq.shape[-1] != p.d or xkv.shape[-1] != p.d:
        raise DimensionError(f"attention expects (B,T,{p.d}), got {xq.shape} / {xkv.shape}")
    B, Tq, d = xq.shape
    Tk = xkv.shape[1]
    if bias is not None and bias.shape != (p.heads, Tq, Tk):
        raise DimensionError(f"bias shape {bias.shape} does not match "
                             f"({p.heads}, {Tq}, {Tk})")
    with mac_tag("proj"):
        q = linear(xq, p.wq, p.bq)
        k = linear(xkv, p.wk)
        v = linear(xkv, p.wv, p.bv)
    q = _heads(q, p.heads) * (1.0 / math.sqrt(p.head_dim))
    k, v = _heads(k, p.heads), _heads(v, p.heads)
    with mac_tag("score"):
        scores = matmul(q, k.transpose(-2, -1))
    if bias is not None:
        scores = scores + bias
    attn = softmax(scores, axis=-1)
    _capture(attn)
    with mac_tag("value"):
        out = matmul(attn, v)
    out = out.permute(0, 2, 1, 3).reshape(B, Tq, d)
    with mac_tag("proj"):
        return linear(out, p.wo, p.bo)


def mhsa(x: Tensor, p: MhsaParams, bias: Tensor | None = None) -> Tensor:
    """softmax(QK^T / sqrt(head_dim) + bias) V, projected by wo."""
    return attention(x, x, p, bias)


def transformer_block(x: Tensor, p: AttnBlockParams, bias: Tensor | None = None) -> Tensor:
    y = mhsa(layernorm(x, p.norm1), p.attn, bias)
    x = x + (y * p.ls.gamma1 if p.ls is not None else y)
    y = mlp_forward(layernorm(x, p.norm2), p.mlp)
    return x + (y * p.ls.gamma2 if p.ls is not None else y)


# ---------------------------------------------------------------- baselines


def full_attention(x: Tensor, p: MhsaParams, bias: Tensor | None = None) -> Tensor:
    """Dense attention over all H*H tokens of a (B, H*H, d) input."""
    return mhsa(x, p, bias)


def windowed_attention(x: Tensor, k: int, p: MhsaParams, bias: Tensor | None = None) -> Tensor:
    """Attention inside each non-overlapping k x k window of a (B, H, H, d) map."""
    H = x.shape[1]
    xw = window_partition(x, k)
    return window_merge(mhsa(xw, p, bias), H, k)


def twins_attention(x: Tensor, k: int, sub_ratio: int, p: MhsaParams) -> Tensor:
    """Window queries attend to keys/values of the average-pooled global map.

    The pooled map has (H/sub_ratio)^2 tokens and is shared by every window.
    """
    B, H, _, d = x.shape
    n = check_window(H, k)
    if sub_ratio < 1 or H % sub_ratio:
        raise ConfigError(f"sub_ratio={sub_ratio} must divide H={H}", "sub_ratio_divides_H")
    S = H // sub_ratio
    q_in = window_partition(x, k).reshape(B, n * n * k * k, d)
    kv = adaptive_avgpool(x, S, axes=(1, 2)).reshape(B, S * S, d)
    out = attention(q_in, kv, p)
    return window_merge(out.reshape(B * n * n, k * k, d), H, k)
