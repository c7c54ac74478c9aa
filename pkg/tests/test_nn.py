import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hatbench.errors import ConfigError, DimensionError, StateError
from hatbench.gradcheck import gradcheck
from hatbench.nn import (Conv2dParams, MlpParams, NormParams, adaptive_avgpool, batchnorm,
                         conv2d, gelu, layernorm, layernorm_2d, mlp_forward, pool_matrix,
                         upsample_index, upsample_nearest)
from hatbench.params import ParamFactory
from hatbench.tensor import Tensor, count_macs


def naive_conv(x, w, b, stride, pad):
    B, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum() + (0 if b is None else b[o])
    return out


@pytest.mark.parametrize("stride,pad,bias", [(1, 1, True), (2, 1, False), (1, 0, True),
                                             (2, 0, True)])
def test_conv2d_matches_loop_oracle(rng, stride, pad, bias):
    pf = ParamFactory(0)
    p = Conv2dParams.init(pf, 3, 4, 3, stride=stride, padding=pad, bias=bias)
    if bias:
        p.bias.data = rng.standard_normal(4)
    x = rng.standard_normal((2, 3, 7, 6))
    with count_macs() as c:
        y = conv2d(Tensor(x), p)
    ref = naive_conv(x, p.weight.data, None if p.bias is None else p.bias.data, stride, pad)
    np.testing.assert_allclose(y.data, ref, atol=1e-12)
    assert c.by_tag["conv"] == int(np.prod(ref.shape)) * 3 * 9


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradcheck(rng, stride):
    pf = ParamFactory(1)
    p = Conv2dParams.init(pf, 2, 3, 3, stride=stride)
    p.bias.data = rng.standard_normal(3)
    x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal(conv2d(x, p).shape))
    errs = gradcheck(lambda: (conv2d(x, p) * w).sum(),
                     {"x": x, "weight": p.weight, "bias": p.bias})
    assert max(errs.values()) < 1e-7


def test_conv2d_channel_mismatch():
    p = Conv2dParams.init(ParamFactory(0), 3, 4)
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 2, 5, 5))), p)


def test_layernorm_oracle_and_grad(rng):
    pf = ParamFactory(0)
    p = NormParams.init(pf, 6)
    p.scale.data = rng.standard_normal(6)
    p.shift.data = rng.standard_normal(6)
    xa = rng.standard_normal((3, 6)) * 4 + 2
    mu = xa.mean(-1, keepdims=True)
    var = xa.var(-1, keepdims=True)
    ref = (xa - mu) / np.sqrt(var + p.eps) * p.scale.data + p.shift.data
    x = Tensor(xa, requires_grad=True)
    np.testing.assert_allclose(layernorm(x, p).data, ref, atol=1e-12)
    w = Tensor(rng.standard_normal((3, 6)))
    errs = gradcheck(lambda: (layernorm(x, p) * w).sum(),
                     {"x": x, "scale": p.scale, "shift": p.shift})
    assert max(errs.values()) < 1e-6


def test_layernorm_2d_normalizes_channels(rng):
    p = NormParams.init(ParamFactory(0), 5, "layernorm_2d")
    y = layernorm_2d(Tensor(rng.standard_normal((2, 5, 3, 3)) * 3 + 1), p).data
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-4)


def test_batchnorm_uses_running_stats(rng):
    p = NormParams.init(ParamFactory(0), 3, "batchnorm")
    p.running_mean.data = np.array([1.0, -2.0, 0.5])
    p.running_var.data = np.array([4.0, 1.0, 0.25])
    x = rng.standard_normal((2, 3, 4, 4))
    ref = (x - p.running_mean.data[:, None, None]) / np.sqrt(
        p.running_var.data[:, None, None] + p.eps)
    np.testing.assert_allclose(batchnorm(Tensor(x), p).data, ref, atol=1e-12)
    p.running_var = None
    with pytest.raises(StateError):
        batchnorm(Tensor(x), p)


@given(st.floats(-6, 6, allow_nan=False))
def test_gelu_matches_erf_formula(v):
    y = gelu(Tensor(np.array([v]))).data[0]
    assert y == pytest.approx(0.5 * v * (1 + math.erf(v / math.sqrt(2))), abs=1e-14)


def test_gelu_gradcheck(rng):
    x = Tensor(rng.standard_normal(10) * 2, requires_grad=True)
    assert gradcheck(lambda: gelu(x).sum(), {"x": x})["x"] < 1e-7


def test_pool_matrix_bins():
    # divisible: disjoint blocks
    np.testing.assert_array_equal(pool_matrix(4, 2), [[.5, .5, 0, 0], [0, 0, .5, .5]])
    # 7 -> 4: bins [0,2) [1,4) [3,6) [5,7)
    P = pool_matrix(7, 4)
    np.testing.assert_allclose(P[1], [0, 1 / 3, 1 / 3, 1 / 3, 0, 0, 0])
    np.testing.assert_allclose(P[3], [0, 0, 0, 0, 0, .5, .5])
    np.testing.assert_allclose(P.sum(1), 1.0)


def test_upsample_index():
    np.testing.assert_array_equal(upsample_index(4, 14), [0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3])
    np.testing.assert_array_equal(upsample_index(2, 4), [0, 0, 1, 1])


@given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 3))
def test_pool_and_upsample_stay_inside_windows(n, k, s):
    if s > k:
        s = k
    H, G = n * k, n * s
    P = pool_matrix(H, G)
    for i in range(G):
        cols = np.nonzero(P[i])[0]
        assert set(cols // k) == {i // s}
    idx = upsample_index(G, H)
    assert np.array_equal(np.arange(H) // k, idx // s)


def test_pool_upsample_gradcheck(rng):
    x = Tensor(rng.standard_normal((1, 2, 7, 7)), requires_grad=True)
    w = Tensor(rng.standard_normal((1, 2, 7, 7)))
    errs = gradcheck(lambda: (upsample_nearest(adaptive_avgpool(x, 4), 7) * w).sum(), {"x": x})
    assert errs["x"] < 1e-7


def test_pool_size_errors():
    with pytest.raises(ConfigError) as e:
        adaptive_avgpool(Tensor(np.ones((1, 1, 3, 3))), 4)
    assert e.value.constraint == "pool_size"
    with pytest.raises(ConfigError) as e:
        upsample_nearest(Tensor(np.ones((1, 1, 3, 3))), 2)
    assert e.value.constraint == "upsample_size"


def test_mlp_is_4x_and_counted(rng):
    p = MlpParams.init(ParamFactory(0), 6)
    assert p.w1.shape == (6, 24) and p.w2.shape == (24, 6)
    with count_macs() as c:
        mlp_forward(Tensor(rng.standard_normal((2, 5, 6))), p)
    assert c.by_tag["mlp"] == 2 * (10 * 6 * 24)
    with pytest.raises(DimensionError):
        MlpParams(p.w1, p.b1, Tensor(np.ones((12, 6))), p.b2)
