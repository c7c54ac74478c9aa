import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hatbench.attention import capture_attention
from hatbench.errors import ConfigError, DimensionError
from hatbench.hat import (CarrierTokens, HatStageConfig, ct_coords, ct_init, global_propagation,
                          hat_stage, hat_window_block, init_hat_stage, mixed_coords)
from hatbench.params import ParamFactory
from hatbench.probes import (ct_pair_influence, equivariance_errors, l0_equivalence,
                             permute_windows, preset, stage_gradcheck, window_block_influence)
from hatbench.tensor import Tensor, count_macs
from hatbench.windows import window_merge, window_partition

CFG = dict(H=14, k=7, L=4, d=8, heads=2)


@pytest.mark.parametrize("kw,constraint", [
    (dict(H=14, k=5, d=8), "k_divides_H"),
    (dict(H=14, k=7, d=8, L=2), "L_perfect_square"),
    (dict(H=8, k=2, d=8, L=9), "ct_grid_fits_window"),
    (dict(H=14, k=7, d=8, heads=3), "heads_divide_d"),
    (dict(H=0, k=7, d=8), "positive_dims"),
    (dict(H=14, k=7, d=8, depth=-1), "depth_nonneg"),
])
def test_config_constraints_named(kw, constraint):
    with pytest.raises(ConfigError) as e:
        HatStageConfig(**kw)
    assert e.value.constraint == constraint


def test_default_geometry():
    cfg = HatStageConfig(**CFG)
    assert (cfg.n_side, cfg.n_windows, cfg.ct_side, cfg.grid_side) == (2, 4, 2, 4)
    single = HatStageConfig(H=7, k=7, d=8)
    assert single.L_eff == 0
    assert single.with_(drop_ct_single_window=False).L_eff == 4


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 3), st.integers(1, 2))
def test_partition_merge_identity(n, k, d, B):
    H = n * k
    x = np.random.default_rng(n * 31 + k).standard_normal((B, H, H, d))
    w = window_partition(Tensor(x), k)
    assert w.shape == (B * n * n, k * k, d)
    np.testing.assert_array_equal(window_merge(w, H, k).data, x)
    # window (r, c) holds x[r*k:(r+1)*k, c*k:(c+1)*k] in raster order
    r, c = n - 1, 0
    np.testing.assert_array_equal(w.data[r * n + c], x[0, r * k:(r + 1) * k, :k].reshape(-1, d))


def test_ct_init_pooling_oracle(rng):
    cfg = HatStageConfig(**CFG, use_ct_conv=False)
    x = rng.standard_normal((1, 14, 14, 8))
    ct = ct_init(Tensor(x), cfg, None).tokens.data
    assert ct.shape == (1, 4, 4, 8)
    # 14 -> 4 bins: [0,4) [3,7) [7,11) [10,14)
    bins = [(0, 4), (3, 7), (7, 11), (10, 14)]

    def cell(i, j):
        (a, b), (c, d) = bins[i], bins[j]
        return x[0, a:b, c:d].mean(axis=(0, 1))

    np.testing.assert_allclose(ct[0, 0, 0], cell(0, 0))
    np.testing.assert_allclose(ct[0, 0, 1], cell(0, 1))
    np.testing.assert_allclose(ct[0, 0, 2], cell(1, 0))
    np.testing.assert_allclose(ct[0, 1, 0], cell(0, 2))  # window (0, 1)
    np.testing.assert_allclose(ct[0, 3, 3], cell(3, 3))


def test_ct_coords_window_major():
    cfg = HatStageConfig(**CFG)
    c = ct_coords(cfg)
    np.testing.assert_array_equal(c[:4], [[0, 0], [0, 1], [1, 0], [1, 1]])
    np.testing.assert_array_equal(c[4:8], [[0, 2], [0, 3], [1, 2], [1, 3]])
    m = mixed_coords(7, 2)
    assert m.shape == (53, 2)
    np.testing.assert_allclose(m[49:], [[1.25, 1.25], [1.25, 4.75], [4.75, 1.25], [4.75, 4.75]])


def test_attention_map_shapes():
    cfg = HatStageConfig(**CFG)
    p = init_hat_stage(cfg, ParamFactory(0))
    with capture_attention() as maps:
        y = hat_stage(Tensor(np.zeros((1, 14, 14, 8))), cfg, p)
    assert y.shape == (1, 14, 14, 8)
    assert [m.shape for m in maps] == [(1, 2, 16, 16), (4, 2, 53, 53)]


def test_global_propagation_adds_upsampled_grid(rng):
    cfg = HatStageConfig(**CFG)
    xl = window_partition(Tensor(rng.standard_normal((1, 14, 14, 8))), 7)
    ct = CarrierTokens(Tensor(rng.standard_normal((1, 4, 4, 8))))
    out = global_propagation(xl, ct, cfg).data
    base = window_merge(xl, 14, 7).data
    # pixel (9, 2) lies in window (1, 0); local (2, 2) -> CT cell (0, 0) of that window
    np.testing.assert_allclose(out[0, 9, 2] - base[0, 9, 2], ct.tokens.data[0, 2, 0])
    # pixel (13, 13): window 3, CT (1, 1)
    np.testing.assert_allclose(out[0, 13, 13] - base[0, 13, 13], ct.tokens.data[0, 3, 3])


def test_window_block_rejects_mismatched_cts():
    cfg = HatStageConfig(**CFG)
    p = init_hat_stage(cfg, ParamFactory(0))
    xl = Tensor(np.zeros((4, 49, 8)))
    with pytest.raises(DimensionError):
        hat_window_block(xl, CarrierTokens(Tensor(np.zeros((1, 4, 1, 8)))), p.blocks[0], cfg)
    with pytest.raises(DimensionError):
        hat_window_block(Tensor(np.zeros((4, 48, 8))), None, p.blocks[0], cfg)


def test_hat_stage_input_shape_checked():
    cfg = HatStageConfig(**CFG)
    p = init_hat_stage(cfg, ParamFactory(0))
    with pytest.raises(DimensionError):
        hat_stage(Tensor(np.zeros((1, 14, 14, 4))), cfg, p)


def test_window_block_isolation():
    res, ct_out = window_block_influence(HatStageConfig(**CFG, use_layerscale=False), 0, 2)
    assert res.inside > 0.1
    assert res.outside == 0.0 and ct_out == 0.0


def test_ct_pair_spreads_information():
    res = ct_pair_influence(HatStageConfig(**CFG, use_layerscale=False, use_ct_conv=False))
    assert np.delete(res.change, 0).min() > 1e-9


def test_l0_stage_equals_windowed_stage():
    assert l0_equivalence(HatStageConfig(**CFG, depth=2), trials=5) == 5


def test_single_window_drops_ct_path():
    cfg = HatStageConfig(H=7, k=7, d=8, heads=2)
    p = init_hat_stage(cfg, ParamFactory(0))
    assert p.ct_conv is None and p.blocks[0].ct_attn is None
    with capture_attention() as maps:
        hat_stage(Tensor(np.zeros((1, 7, 7, 8))), cfg, p)
    assert [m.shape[-1] for m in maps] == [49]


def test_permute_windows_helper():
    x = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    y = permute_windows(x, 2, np.array([3, 2, 1, 0]))
    np.testing.assert_array_equal(y[0, :2, :2, 0], x[0, 2:, 2:, 0])


def test_equivariance_without_biases():
    assert max(equivariance_errors(HatStageConfig(**CFG, depth=2), trials=2)) <= 1e-6


def test_abs_bias_breaks_equivariance():
    cfg = HatStageConfig(**CFG, use_rel_bias=False, use_ct_conv=False, use_layerscale=False)
    p = init_hat_stage(cfg, ParamFactory(0))
    x = np.random.default_rng(0).standard_normal((1, 14, 14, 8))
    perm = np.array([1, 0, 3, 2])
    a = permute_windows(hat_stage(Tensor(x), cfg, p).data, 7, perm)
    b = hat_stage(Tensor(permute_windows(x, 7, perm)), cfg, p).data
    assert np.abs(a - b).max() > 1e-6


def test_stage_gradcheck_sampled():
    errs = stage_gradcheck(preset("hat-tiny"), 0, eps=1e-4, max_entries=4)
    assert max(errs.values()) < 1e-4


def test_abs_bias_per_block_variant_runs():
    cfg = HatStageConfig(**CFG, depth=2, abs_bias_per_block=True, ct_conv_residual=True)
    p = init_hat_stage(cfg, ParamFactory(0))
    assert p.abs_bias is None and p.blocks[1].abs_bias is not None
    y = hat_stage(Tensor(np.ones((2, 14, 14, 8))), cfg, p)
    assert np.isfinite(y.data).all()


def test_meta_forward_counts_macs():
    cfg = HatStageConfig(**CFG)
    p = init_hat_stage(cfg, ParamFactory(0, meta=True))
    with count_macs() as c:
        y = hat_stage(Tensor.meta((1, 14, 14, 8)), cfg, p)
    assert y.is_meta and c.total > 0
    p2 = init_hat_stage(cfg, ParamFactory(0))
    with count_macs() as c2:
        hat_stage(Tensor(np.zeros((1, 14, 14, 8))), cfg, p2)
    assert c.by_tag == c2.by_tag
