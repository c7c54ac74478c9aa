import numpy as np
import pytest

from hatbench.errors import ConfigError
from hatbench.hat import HatStageConfig, init_window_stage
from hatbench.model import (VARIANTS, get_variant, param_count, plug_hat_into,
                            stage_resolutions)
from hatbench.params import ParamFactory, count

from oracles import oracle


@pytest.mark.parametrize("name", sorted(VARIANTS))
@pytest.mark.parametrize("div", [1, 8])
def test_param_count_matches_oracle(name, div):
    spec = get_variant(name).scaled(div)
    total, parts = param_count(spec)
    assert (total, parts) == oracle(spec)
    assert sum(parts.values()) == total


def test_full_width_totals_frozen():
    got = {n: param_count(n)[0] for n in VARIANTS}
    assert got == {"faster_vit_1": 198_057_608, "faster_vit_2": 286_164_008,
                   "faster_vit_3": 608_624_936, "faster_vit_4": 1_423_177_256}


def test_registered_variant_values():
    v = get_variant("faster_vit_2")
    assert v.stem_dims == (64, 96)
    assert [s.dim for s in v.stages] == [192, 384, 768, 1536]
    assert [s.depth for s in v.stages] == [3, 3, 8, 5]
    assert [s.kind for s in v.stages] == ["res", "res", "hat", "hat"]
    assert [s.heads for s in v.stages[2:]] == [8, 16]
    assert stage_resolutions(v) == [56, 28, 14, 7]
    with pytest.raises(ConfigError) as e:
        get_variant("faster_vit_0")
    assert e.value.constraint == "known_variant"


def test_scaled_heads_divide_width():
    s = get_variant("faster_vit_4").scaled(8)
    assert s.stem_dims == (8, 24)
    assert [(st.dim, st.heads) for st in s.stages[2:]] == [(196, 14), (392, 28)]
    for st in s.stages[2:]:
        assert st.dim % st.heads == 0


def test_stage_configs():
    v = get_variant("faster_vit_1")
    c3, c4 = v.stage_config(2), v.stage_config(3)
    assert (c3.H, c3.k, c3.L_eff, c3.heads, c3.depth) == (14, 7, 4, 8, 8)
    assert (c4.H, c4.k, c4.L_eff) == (7, 7, 0)
    assert v.stage_config(3, input_size=448).L_eff == 4


def test_plug_hat_reuses_window_params():
    cfg = HatStageConfig(H=14, k=7, d=8, heads=2, L=0, depth=2)
    pf = ParamFactory(0)
    win = init_window_stage(cfg, pf)
    new_cfg, hat, report = plug_hat_into(cfg, win, pf, L=4)
    assert new_cfg.L == 4
    assert hat.blocks[0].win_attn is win.blocks[0]
    assert report["extra_params"] == count(hat) - count(win)
    assert "ct_conv/weight" in report["added_shapes"]
    assert all("win_attn" not in n for n in report["added_shapes"])
    with pytest.raises(ConfigError):
        plug_hat_into(new_cfg, win, pf)


def test_forward_small_variant_runs():
    from hatbench.model import build_variant, forward
    from hatbench.tensor import Tensor
    spec = get_variant("faster_vit_1").scaled(16)
    m = build_variant(spec, seed=0)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 224, 224)), dtype="f32")
    logits, feats = forward(m, x, return_features=True)
    assert logits.shape == (2, 1000) and np.isfinite(logits.data).all()
    assert [f.shape[-1] for f in feats] == [56, 28, 14, 7]
