import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hatbench.attention import (AttnBlockParams, MhsaParams, RelBiasMlp, capture_attention,
                                distinct_offsets, full_attention, grid_coords, log_offsets, mhsa,
                                normalize_coords, relbias_table, transformer_block,
                                twins_attention, windowed_attention)
from hatbench.errors import ConfigError, DimensionError
from hatbench.gradcheck import gradcheck
from hatbench.params import ParamFactory, named_parameters
from hatbench.tensor import Tape, Tensor


def np_mhsa(x, p, bias=None):
    """Loop-over-heads reference."""
    h, d = p.heads, p.d
    hd = d // h
    q = x @ p.wq.data + p.bq.data
    k = x @ p.wk.data
    v = x @ p.wv.data + p.bv.data
    out = np.zeros_like(q)
    for i in range(h):
        sl = slice(i * hd, (i + 1) * hd)
        s = q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / np.sqrt(hd)
        if bias is not None:
            s = s + bias[i]
        s = np.exp(s - s.max(-1, keepdims=True))
        s /= s.sum(-1, keepdims=True)
        out[..., sl] = s @ v[..., sl]
    return out @ p.wo.data + p.bo.data


def random_mhsa(d, heads, seed=0, std=0.5):
    p = MhsaParams.init(ParamFactory(seed), d, heads)
    rng = np.random.default_rng(seed + 1)
    for _, t in named_parameters(p):
        t.data = rng.standard_normal(t.shape) * std
    return p


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_mhsa_matches_reference(rng, heads):
    p = random_mhsa(8, heads)
    x = rng.standard_normal((3, 5, 8))
    bias = rng.standard_normal((heads, 5, 5))
    np.testing.assert_allclose(mhsa(Tensor(x), p, Tensor(bias)).data, np_mhsa(x, p, bias),
                               atol=1e-12)


def test_attention_gradcheck_with_relbias(rng):
    p = random_mhsa(4, 2, std=0.3)
    rb = RelBiasMlp.init(ParamFactory(3), 2, hidden=6)
    coords = grid_coords(2)
    x = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 4, 4)))
    params = dict(named_parameters(p, "attn"))
    params.update(named_parameters(rb, "rb"))
    params["x"] = x
    errs = gradcheck(lambda: (mhsa(x, p, relbias_table(rb, coords)) * w).sum(), params)
    assert max(errs.values()) < 1e-6


def test_heads_must_divide_d():
    with pytest.raises(ConfigError) as e:
        MhsaParams.init(ParamFactory(0), 6, 4)
    assert e.value.constraint == "heads_divide_d"


def test_bias_shape_checked():
    p = random_mhsa(4, 2)
    with pytest.raises(DimensionError):
        mhsa(Tensor(np.ones((1, 3, 4))), p, Tensor(np.zeros((2, 3, 4))))


def test_log_offsets_values():
    off = log_offsets(np.array([[0.0, 0.0], [0.0, 3.0], [-1.0, 0.0]]))
    assert off[1, 0, 1] == pytest.approx(2.0)  # log2(1+3)
    assert off[0, 1, 1] == pytest.approx(-2.0)
    assert off[2, 0, 0] == pytest.approx(-1.0)
    assert np.all(np.diagonal(off, axis1=0, axis2=1) == 0)


def test_normalize_coords_range():
    c = normalize_coords(grid_coords(5), 5)
    assert c.min() == -1.0 and c.max() == 1.0
    assert np.all(normalize_coords(grid_coords(1), 1) == 0)


def test_relbias_equal_offsets_bit_identical():
    rb = RelBiasMlp.init(ParamFactory(0), heads=3, hidden=8)
    coords = grid_coords(4)
    table = relbias_table(rb, coords).data
    off = log_offsets(coords).reshape(-1, 2)
    flat = table.reshape(3, -1)
    _, inv = np.unique(off, axis=0, return_inverse=True)
    for g in np.unique(inv):
        cols = flat[:, inv.ravel() == g]
        assert np.all(cols == cols[:, :1])


def test_relbias_cache_hits_and_tape_bypass():
    rb = RelBiasMlp.init(ParamFactory(0), heads=2, hidden=4)
    c = grid_coords(3)
    a = relbias_table(rb, c)
    b = relbias_table(rb, c)
    assert a is b and rb.hits == 1 and rb.misses == 1
    with Tape():
        t = relbias_table(rb, c)
    assert t is not a and rb.hits == 1
    rb.clear_cache()
    assert rb.hits == rb.misses == 0 and not rb.cache


def test_windowed_with_k_equal_H_is_full(rng):
    p = random_mhsa(4, 2)
    x = rng.standard_normal((1, 6, 6, 4))
    full = full_attention(Tensor(x.reshape(1, 36, 4)), p).data.reshape(1, 6, 6, 4)
    np.testing.assert_allclose(windowed_attention(Tensor(x), 6, p).data, full, atol=1e-12)


def test_twins_subratio_one_is_full(rng):
    p = random_mhsa(4, 2)
    x = rng.standard_normal((1, 4, 4, 4))
    full = full_attention(Tensor(x.reshape(1, 16, 4)), p).data.reshape(1, 4, 4, 4)
    np.testing.assert_allclose(twins_attention(Tensor(x), 4, 1, p).data, full, atol=1e-12)
    # smaller windows only regroup the queries
    np.testing.assert_allclose(twins_attention(Tensor(x), 2, 1, p).data, full, atol=1e-12)


def test_twins_pooled_key_count():
    p = random_mhsa(4, 1)
    with capture_attention() as maps:
        twins_attention(Tensor(np.ones((1, 8, 8, 4))), 4, 4, p)
    assert maps[0].shape == (1, 1, 64, 4)
    with pytest.raises(ConfigError):
        twins_attention(Tensor(np.ones((1, 8, 8, 4))), 4, 3, p)


def test_windowed_attention_is_local(rng):
    p = random_mhsa(4, 2)
    x = rng.standard_normal((1, 8, 8, 4))
    y0 = windowed_attention(Tensor(x), 4, p).data
    x[0, 0, 0] += 1.0
    y1 = windowed_attention(Tensor(x), 4, p).data
    changed = np.abs(y1 - y0).max(-1)[0] > 0
    assert changed[:4, :4].all() and not changed[4:].any() and not changed[:, 4:].any()


@given(st.integers(1, 3), st.integers(1, 6))
def test_attention_rows_are_distributions(heads, T):
    p = random_mhsa(6, heads)
    x = np.random.default_rng(T).standard_normal((2, T, p.d)) * 3
    with capture_attention() as maps:
        mhsa(Tensor(x), p)
    np.testing.assert_allclose(maps[0].sum(-1), 1.0, atol=1e-12)


def test_transformer_block_layerscale_residual(rng):
    blk = AttnBlockParams.init(ParamFactory(0), 8, 2, layerscale=1e-5)
    x = rng.standard_normal((1, 5, 8))
    y = transformer_block(Tensor(x), blk).data
    assert np.abs(y - x).max() < 1e-4
    blk0 = AttnBlockParams.init(ParamFactory(0), 8, 2, layerscale=None)
    assert blk0.ls is None
    assert np.abs(transformer_block(Tensor(x), blk0).data - x).max() > 1e-4


@pytest.mark.parametrize("coords", [grid_coords(5), grid_coords(3) * 0.5 + 2,
                                    np.array([[0.0, 0.0], [1.0, 2.5], [1.0, 0.0]])])
def test_distinct_offsets_matches_unique(coords):
    feat = log_offsets(coords).reshape(-1, 2)
    assert distinct_offsets(coords) == len(np.unique(feat, axis=0))
