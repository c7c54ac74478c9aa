"""Reusable numerical probes shared by the verify command, scripts and tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcheck import gradcheck
from .hat import (HatStageConfig, ct_attention_block, ct_init, global_propagation,
                  hat_stage, hat_window_block, init_hat_stage, window_stage_view,
                  windowed_stage)
from .params import ParamFactory, named_parameters
from .tensor import Tensor, no_grad
from .windows import window_merge, window_partition

PRESETS = {
    "hat-small": dict(H=14, k=7, L=4, d=8, heads=2, depth=1),
    "hat-stage": dict(H=14, k=7, L=4, d=8, heads=2, depth=2),
    "window-small": dict(H=14, k=7, L=0, d=8, heads=2, depth=1),
    "hat-tiny": dict(H=8, k=4, L=1, d=4, heads=2, depth=1, bias_hidden=4),
}


def preset(name: str) -> HatStageConfig:
    from .errors import ConfigError
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}", "known_preset")
    return HatStageConfig(**PRESETS[name])


def random_input(cfg: HatStageConfig, seed: int, batch: int = 1, dtype="f64") -> Tensor:
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((batch, cfg.H, cfg.H, cfg.d)), dtype=dtype)


def jitter(params, seed: int, scale: float = 0.2) -> None:
    """Add N(0, scale^2) noise to every trainable tensor, in place.

    Moves a freshly initialised model to a generic point: at init the 1e-5
    LayerScale and near-uniform attention make branch gradients so small that
    central differences drown in rounding error.
    """
    rng = np.random.default_rng(seed)
    for _, t in named_parameters(params):
        t.data = t.data + scale * rng.standard_normal(t.shape)


def stage_gradcheck(cfg: HatStageConfig, seed: int = 0, eps: float = 1e-5,
                    max_entries: int | None = None) -> dict[str, float]:
    """Finite-difference check of every parameter of a HAT stage in f64.

    Parameters are jittered to a generic point first. The loss is a fixed
    random projection of the stage output.
    """
    pf = ParamFactory(seed, "f64")
    params = init_hat_stage(cfg, pf)
    jitter(params, seed + 3)
    x = random_input(cfg, seed + 1)
    w = Tensor(np.random.default_rng(seed + 2).standard_normal((1, cfg.H, cfg.H, cfg.d)))

    def loss():
        return (hat_stage(x, cfg, params) * w).sum()

    return gradcheck(loss, dict(named_parameters(params)), eps=eps,
                     max_entries=max_entries, seed=seed)


def _window_delta(cfg: HatStageConfig, seed: int, window: int) -> np.ndarray:
    """(1, H, H, d) perturbation supported on one window."""
    rng = np.random.default_rng(seed)
    delta = np.zeros((1, cfg.H, cfg.H, cfg.d))
    n = cfg.n_side
    r, c = divmod(window, n)
    k = cfg.k
    delta[0, r * k:(r + 1) * k, c * k:(c + 1) * k] = rng.standard_normal((k, k, cfg.d))
    return delta


def _per_window_change(a: np.ndarray, b: np.ndarray, cfg: HatStageConfig) -> np.ndarray:
    """Max abs change per window for two (1, H, H, d) maps."""
    diff = np.abs(a - b).reshape(cfg.n_side, cfg.k, cfg.n_side, cfg.k, cfg.d)
    return diff.max(axis=(1, 3, 4)).ravel()


@dataclass
class InfluenceResult:
    perturbed: int
    change: np.ndarray  # per-window max abs change of the output

    @property
    def inside(self) -> float:
        return float(self.change[self.perturbed])

    @property
    def outside(self) -> float:
        return float(np.delete(self.change, self.perturbed).max())


def window_block_influence(cfg: HatStageConfig, seed: int = 0,
                           window: int = 0) -> tuple[InfluenceResult, float]:
    """Perturb one window and run a single window+CT block.

    Returns the per-window change of the window tokens and the largest change
    among the *other* windows' carrier tokens.
    """
    pf = ParamFactory(seed, "f64")
    params = init_hat_stage(cfg, pf)
    blk = params.blocks[0]
    x = random_input(cfg, seed + 1).data
    xp = x + _window_delta(cfg, seed + 2, window)
    rng = np.random.default_rng(seed + 3)
    ct = None
    if cfg.L_eff:
        from .hat import CarrierTokens
        ct = CarrierTokens(Tensor(rng.standard_normal((1, cfg.n_windows, cfg.L_eff, cfg.d))))
    with no_grad():
        ya, ca = hat_window_block(window_partition(Tensor(x), cfg.k), ct, blk, cfg)
        yb, cb = hat_window_block(window_partition(Tensor(xp), cfg.k), ct, blk, cfg)
    a = window_merge(ya, cfg.H, cfg.k).data
    b = window_merge(yb, cfg.H, cfg.k).data
    res = InfluenceResult(window, _per_window_change(a, b, cfg))
    ct_out = 0.0
    if ct is not None:
        dc = np.abs(ca.tokens.data - cb.tokens.data).max(axis=(0, 2, 3))
        ct_out = float(np.delete(dc, window).max())
    return res, ct_out


def ct_pair_influence(cfg: HatStageConfig, seed: int = 0, window: int = 0) -> InfluenceResult:
    """Perturb one window, run CT init + one CT-attention block + one window block."""
    pf = ParamFactory(seed, "f64")
    params = init_hat_stage(cfg, pf)
    blk = params.blocks[0]
    x = random_input(cfg, seed + 1).data
    xp = x + _window_delta(cfg, seed + 2, window)

    def run(arr):
        t = Tensor(arr)
        ct = ct_init(t, cfg, params.ct_conv)
        ct = ct_attention_block(ct, blk, cfg)
        xl, ct = hat_window_block(window_partition(t, cfg.k), ct, blk, cfg)
        return window_merge(xl, cfg.H, cfg.k).data

    with no_grad():
        return InfluenceResult(window, _per_window_change(run(x), run(xp), cfg))


def l0_equivalence(cfg: HatStageConfig, trials: int = 100, seed: int = 0) -> int:
    """Number of random inputs on which an L=0 HAT stage and the windowed stage
    sharing its parameters agree bit for bit."""
    cfg = cfg.with_(L=0)
    params = init_hat_stage(cfg, ParamFactory(seed, "f64"))
    view = window_stage_view(params)
    rng = np.random.default_rng(seed + 1)
    same = 0
    with no_grad():
        for _ in range(trials):
            x = Tensor(rng.standard_normal((1, cfg.H, cfg.H, cfg.d)))
            a = hat_stage(x, cfg, params).data
            b = windowed_stage(x, cfg, view).data
            same += bool(np.array_equal(a, b))
    return same


def permute_windows(x: np.ndarray, k: int, perm: np.ndarray) -> np.ndarray:
    """Move window ``perm[i]`` of a (B, H, H, d) map into slot ``i``."""
    B, H, _, d = x.shape
    n = H // k
    w = x.reshape(B, n, k, n, k, d).transpose(0, 1, 3, 2, 4, 5).reshape(B, n * n, k, k, d)
    w = w[:, perm]
    return w.reshape(B, n, n, k, k, d).transpose(0, 1, 3, 2, 4, 5).reshape(B, H, H, d)


def equivariance_errors(cfg: HatStageConfig, trials: int = 20, seed: int = 0) -> list[float]:
    """Max abs error of stage(permute(x)) vs permute(stage(x)) per random trial.

    Requires a bias-free config: absolute/relative biases and the CT conv
    all tie outputs to absolute positions.
    """
    cfg = cfg.with_(use_abs_bias=False, use_rel_bias=False, use_ct_conv=False)
    rng = np.random.default_rng(seed)
    errs = []
    with no_grad():
        for t in range(trials):
            params = init_hat_stage(cfg, ParamFactory(seed + 1000 + t, "f64"))
            x = rng.standard_normal((1, cfg.H, cfg.H, cfg.d))
            perm = rng.permutation(cfg.n_windows)
            a = permute_windows(hat_stage(Tensor(x), cfg, params).data, cfg.k, perm)
            b = hat_stage(Tensor(permute_windows(x, cfg.k, perm)), cfg, params).data
            errs.append(float(np.abs(a - b).max()))
    return errs
