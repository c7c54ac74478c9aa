"""Hierarchical attention: carrier tokens, CT attention, window+CT attention, propagation.

Layout conventions (channels-last throughout a stage):

* feature map ``x``:           (B, H, H, d)
* window tokens ``xl``:        (B * n_windows, k*k, d), windows in raster order
* carrier tokens:              (B, n_windows, L, d); window ``w`` owns ``[:, w]``
* CT grid:                     (B, G, G, d) with G = (H/k) * sqrt(L); each window
                               owns a sqrt(L) x sqrt(L) block of it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import (AbsBiasMlp, AttnBlockParams, abs_bias, grid_coords,
                        normalize_coords, relbias_table, transformer_block)
from .errors import ConfigError, DimensionError
from .nn import Conv2dParams, adaptive_avgpool, conv2d, upsample_nearest
from .params import ParamFactory, count
from .tensor import Tensor, concat, split
from .windows import check_window, window_merge, window_partition

__all__ = [
    "HatStageConfig", "CarrierTokens", "HatBlockParams", "HatStageParams",
    "WindowStageParams", "window_partition", "window_merge", "ct_init",
    "ct_attention_block", "hat_window_block", "global_propagation", "hat_stage",
    "windowed_stage", "init_hat_stage", "init_window_stage", "window_stage_view",
]


@dataclass
class HatStageConfig:
    """Hyperparameters of one HAT stage.

    ``L`` is the number of carrier tokens per window and must be a perfect
    square (they form a sqrt(L) x sqrt(L) grid per window); 0 disables CTs.
    ``c`` is informational only. With a single window the CT path is dropped
    unless ``drop_ct_single_window`` is False.
    """

    H: int
    d: int
    k: int = 7
    L: int = 4
    heads: int = 2
    depth: int = 1
    c: int | None = None
    use_abs_bias: bool = True
    use_rel_bias: bool = True
    use_layerscale: bool = True
    use_ct_conv: bool = True
    ct_conv_residual: bool = False
    abs_bias_per_block: bool = False
    drop_ct_single_window: bool = True
    layerscale_init: float = 1e-5
    bias_hidden: int = 32
    eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.H < 1 or self.d < 1:
            raise ConfigError(f"H={self.H} and d={self.d} must be positive", "positive_dims")
        check_window(self.H, self.k)
        if self.L < 0 or math.isqrt(self.L) ** 2 != self.L:
            raise ConfigError(f"L={self.L} must be a perfect square", "L_perfect_square")
        if math.isqrt(self.L) > self.k:
            raise ConfigError(f"sqrt(L)={math.isqrt(self.L)} exceeds window size k={self.k}",
                              "ct_grid_fits_window")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d={self.d}", "heads_divide_d")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0", "depth_nonneg")
        if self.eps <= 0:
            raise ConfigError("eps must be positive", "eps_positive")

    @property
    def n_side(self) -> int:
        return self.H // self.k

    @property
    def n_windows(self) -> int:
        return self.n_side ** 2

    @property
    def L_eff(self) -> int:
        if self.drop_ct_single_window and self.n_windows == 1:
            return 0
        return self.L

    @property
    def ct_side(self) -> int:
        return math.isqrt(self.L_eff)

    @property
    def grid_side(self) -> int:
        return self.n_side * self.ct_side

    def with_(self, **kw) -> "HatStageConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return HatStageConfig(**d)


@dataclass
class CarrierTokens:
    tokens: Tensor  # (B, n_windows, L, d)

    @property
    def L(self) -> int:
        return self.tokens.shape[2]

    @property
    def n_windows(self) -> int:
        return self.tokens.shape[1]

    def __add__(self, other: Tensor) -> "CarrierTokens":
        return CarrierTokens(self.tokens + other)


@dataclass
class HatBlockParams:
    win_attn: AttnBlockParams
    ct_attn: AttnBlockParams | None = None
    abs_bias: AbsBiasMlp | None = None
    ct_abs_bias: AbsBiasMlp | None = None


@dataclass
class HatStageParams:
    blocks: list[HatBlockParams] = field(default_factory=list)
    ct_conv: Conv2dParams | None = None
    abs_bias: AbsBiasMlp | None = None
    ct_abs_bias: AbsBiasMlp | None = None


@dataclass
class WindowStageParams:
    """A plain windowed-attention stage (the L=0 counterpart of a HAT stage)."""

    blocks: list[AttnBlockParams] = field(default_factory=list)
    abs_bias: AbsBiasMlp | None = None


# ---------------------------------------------------------------- init


def _attn_block(pf: ParamFactory, cfg: HatStageConfig) -> AttnBlockParams:
    return AttnBlockParams.init(pf, cfg.d, cfg.heads,
                                layerscale=cfg.layerscale_init if cfg.use_layerscale else None,
                                rel_bias=cfg.use_rel_bias, bias_hidden=cfg.bias_hidden,
                                eps=cfg.eps)


def init_hat_stage(cfg: HatStageConfig, pf: ParamFactory) -> HatStageParams:
    has_ct = cfg.L_eff > 0
    per_block = cfg.use_abs_bias and cfg.abs_bias_per_block
    per_stage = cfg.use_abs_bias and not cfg.abs_bias_per_block
    blocks = []
    for _ in range(cfg.depth):
        blocks.append(HatBlockParams(
            win_attn=_attn_block(pf, cfg),
            ct_attn=_attn_block(pf, cfg) if has_ct else None,
            abs_bias=AbsBiasMlp.init(pf, cfg.d, cfg.bias_hidden) if per_block else None,
            ct_abs_bias=(AbsBiasMlp.init(pf, cfg.d, cfg.bias_hidden)
                         if per_block and has_ct else None)))
    return HatStageParams(
        blocks=blocks,
        ct_conv=Conv2dParams.init(pf, cfg.d, cfg.d, 3) if has_ct and cfg.use_ct_conv else None,
        abs_bias=AbsBiasMlp.init(pf, cfg.d, cfg.bias_hidden) if per_stage else None,
        ct_abs_bias=(AbsBiasMlp.init(pf, cfg.d, cfg.bias_hidden)
                     if per_stage and has_ct else None))


def init_window_stage(cfg: HatStageConfig, pf: ParamFactory) -> WindowStageParams:
    return WindowStageParams(
        blocks=[_attn_block(pf, cfg) for _ in range(cfg.depth)],
        abs_bias=AbsBiasMlp.init(pf, cfg.d, cfg.bias_hidden) if cfg.use_abs_bias else None)


def window_stage_view(params: HatStageParams) -> WindowStageParams:
    """The windowed-attention parameters embedded in a HAT stage (shared tensors)."""
    return WindowStageParams(blocks=[b.win_attn for b in params.blocks],
                             abs_bias=params.abs_bias)


# ---------------------------------------------------------------- coordinates


def window_coords(k: int) -> np.ndarray:
    return grid_coords(k)


def ct_center_coords(k: int, ct_side: int) -> np.ndarray:
    """Window-local centres of the ct_side x ct_side sub-regions, raster order."""
    centers = (np.arange(ct_side) + 0.5) * k / ct_side - 0.5
    r, c = np.meshgrid(centers, centers, indexing="ij")
    return np.stack([r.ravel(), c.ravel()], axis=1)


def mixed_coords(k: int, ct_side: int) -> np.ndarray:
    """Coordinates of the k*k window tokens followed by that window's CTs."""
    if ct_side == 0:
        return window_coords(k)
    return np.concatenate([window_coords(k), ct_center_coords(k, ct_side)])


def _window_major(arr: np.ndarray, n: int, s: int) -> np.ndarray:
    # (G*G, ...) raster -> window-major order matching window_partition(grid, s)
    tail = arr.shape[1:]
    return arr.reshape((n, s, n, s) + tail).swapaxes(1, 2).reshape((n * n * s * s,) + tail)


def ct_coords(cfg: HatStageConfig) -> np.ndarray:
    """CT grid coordinates in carrier-token (window-major) order."""
    return _window_major(grid_coords(cfg.grid_side), cfg.n_side, cfg.ct_side)


def _abs_map(p: AbsBiasMlp, H: int, d: int) -> Tensor:
    return abs_bias(p, normalize_coords(grid_coords(H), H)).reshape(H, H, d)


def _ct_abs(p: AbsBiasMlp, cfg: HatStageConfig) -> Tensor:
    G = cfg.grid_side
    coords = _window_major(normalize_coords(grid_coords(G), G), cfg.n_side, cfg.ct_side)
    return abs_bias(p, coords).reshape(cfg.n_windows, cfg.L_eff, cfg.d)


def _check_input(x: Tensor, cfg: HatStageConfig) -> int:
    if x.ndim != 4 or x.shape[1:] != (cfg.H, cfg.H, cfg.d):
        raise DimensionError(f"expected (B, {cfg.H}, {cfg.H}, {cfg.d}), got {x.shape}")
    return x.shape[0]


# ---------------------------------------------------------------- stage pieces


def ct_init(x: Tensor, cfg: HatStageConfig, conv: Conv2dParams | None) -> CarrierTokens:
    """Conv3x3 positional encoding, then average-pool to the CT grid, grouped per window."""
    B = _check_input(x, cfg)
    if cfg.L_eff == 0:
        raise ConfigError("carrier tokens are disabled for this configuration (L_eff=0)",
                          "ct_enabled")
    xc = x.permute(0, 3, 1, 2)
    if cfg.use_ct_conv:
        if conv is None:
            raise ConfigError("use_ct_conv is set but no conv parameters given", "ct_conv")
        y = conv2d(xc, conv)
        xc = y + xc if cfg.ct_conv_residual else y
    grid = adaptive_avgpool(xc, cfg.grid_side).permute(0, 2, 3, 1)
    tokens = window_partition(grid, cfg.ct_side)
    return CarrierTokens(tokens.reshape(B, cfg.n_windows, cfg.L_eff, cfg.d))


def ct_attention_block(ct: CarrierTokens, blk: HatBlockParams,
                       cfg: HatStageConfig) -> CarrierTokens:
    """Full self-attention over all n_windows * L carrier tokens (+ MLP)."""
    B, nw, L, d = ct.tokens.shape
    p = blk.ct_attn
    bias = relbias_table(p.rel_bias, ct_coords(cfg)) if p.rel_bias is not None else None
    x = transformer_block(ct.tokens.reshape(B, nw * L, d), p, bias)
    return CarrierTokens(x.reshape(B, nw, L, d))


def hat_window_block(xl: Tensor, ct: CarrierTokens | None, blk: HatBlockParams,
                     cfg: HatStageConfig) -> tuple[Tensor, CarrierTokens | None]:
    """Attention over each window's k*k tokens concatenated with its own L CTs."""
    k2 = cfg.k * cfg.k
    if xl.ndim != 3 or xl.shape[1:] != (k2, cfg.d) or xl.shape[0] % cfg.n_windows:
        raise DimensionError(f"window tokens {xl.shape} do not match k={cfg.k}, d={cfg.d}")
    p = blk.win_attn
    L = cfg.L_eff
    bias = None
    if p.rel_bias is not None:
        bias = relbias_table(p.rel_bias, mixed_coords(cfg.k, cfg.ct_side))
    if L == 0:
        if ct is not None:
            raise DimensionError("carrier tokens given but L_eff is 0")
        return transformer_block(xl, p, bias), None
    if ct is None or ct.L != L or ct.tokens.shape[0] * ct.n_windows != xl.shape[0]:
        got = None if ct is None else ct.tokens.shape
        raise DimensionError(f"carrier tokens {got} do not match {xl.shape[0]} windows x L={L}")
    B, nw, _, d = ct.tokens.shape
    xw = concat([xl, ct.tokens.reshape(B * nw, L, d)], axis=1)
    xw = transformer_block(xw, p, bias)
    xl, c = split(xw, [k2, L], axis=1)
    return xl, CarrierTokens(c.reshape(B, nw, L, d))


def global_propagation(xl: Tensor, ct: CarrierTokens | None, cfg: HatStageConfig) -> Tensor:
    """Merge windows and add the nearest-upsampled CT grid."""
    x = window_merge(xl, cfg.H, cfg.k)
    if ct is None:
        return x
    B, nw, L, d = ct.tokens.shape
    s = math.isqrt(L)
    grid = window_merge(ct.tokens.reshape(B * nw, L, d), cfg.n_side * s, s)
    return x + upsample_nearest(grid, cfg.H, axes=(1, 2))


def _add_windowed(xl: Tensor, bias: Tensor, nw: int) -> Tensor:
    Bn, T, d = xl.shape
    return (xl.reshape(Bn // nw, nw, T, d) + bias).reshape(Bn, T, d)


def hat_stage(x: Tensor, cfg: HatStageConfig, params: HatStageParams) -> Tensor:
    """(B, H, H, d) -> (B, H, H, d) through ``cfg.depth`` HAT blocks."""
    _check_input(x, cfg)
    if len(params.blocks) != cfg.depth:
        raise ConfigError(f"{len(params.blocks)} blocks for depth {cfg.depth}", "depth_matches")
    has_ct = cfg.L_eff > 0
    ct = ct_init(x, cfg, params.ct_conv) if has_ct else None
    if cfg.use_abs_bias and not cfg.abs_bias_per_block:
        x = x + _abs_map(params.abs_bias, cfg.H, cfg.d)
        if has_ct:
            ct = ct + _ct_abs(params.ct_abs_bias, cfg)
    xl = window_partition(x, cfg.k)
    for blk in params.blocks:
        if cfg.use_abs_bias and cfg.abs_bias_per_block:
            xl = _add_windowed(
                xl, window_partition(_abs_map(blk.abs_bias, cfg.H, cfg.d).reshape(
                    1, cfg.H, cfg.H, cfg.d), cfg.k), cfg.n_windows)
            if has_ct:
                ct = ct + _ct_abs(blk.ct_abs_bias, cfg)
        if has_ct:
            ct = ct_attention_block(ct, blk, cfg)
        xl, ct = hat_window_block(xl, ct, blk, cfg)
    return global_propagation(xl, ct, cfg)


def windowed_stage(x: Tensor, cfg: HatStageConfig, params: WindowStageParams) -> Tensor:
    """Baseline stage: absolute bias, then ``depth`` windowed transformer blocks."""
    _check_input(x, cfg)
    if cfg.use_abs_bias:
        x = x + _abs_map(params.abs_bias, cfg.H, cfg.d)
    xl = window_partition(x, cfg.k)
    for blk in params.blocks:
        bias = (relbias_table(blk.rel_bias, window_coords(cfg.k))
                if blk.rel_bias is not None else None)
        xl = transformer_block(xl, blk, bias)
    return window_merge(xl, cfg.H, cfg.k)


def ct_path_param_count(params: HatStageParams) -> int:
    """Parameters that exist only because of carrier tokens."""
    total = count(params.ct_conv) + count(params.ct_abs_bias)
    for b in params.blocks:
        total += count(b.ct_attn) + count(b.ct_abs_bias)
    return total
