"""Self-check suite behind ``hatbench verify``: one named property per line."""
from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, HatBenchError


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<32} {self.detail} " \
               f"({self.seconds:.2f}s)"


def _rng(seed):
    return np.random.default_rng(seed)


def check_window_roundtrip(seed=0):
    from .tensor import Tensor
    from .windows import window_merge, window_partition
    for H, k in ((14, 7), (16, 4), (8, 8)):
        x = Tensor(_rng(seed).standard_normal((2, H, H, 3)))
        if not np.array_equal(window_merge(window_partition(x, k), H, k).data, x.data):
            return False, f"merge(partition(x)) != x at H={H}, k={k}"
    return True, "identity at 3 geometries"


def check_softmax(seed=0):
    from .tensor import Tensor, softmax
    x = _rng(seed).standard_normal((5, 17)) * 30
    err = float(np.abs(softmax(Tensor(x)).data.sum(-1) - 1).max())
    return err < 1e-12, f"max |row sum - 1| = {err:.1e}"


def check_layernorm(seed=0):
    from .nn import NormParams, layernorm
    from .params import ParamFactory
    from .tensor import Tensor
    p = NormParams.init(ParamFactory(seed), 16)
    y = layernorm(Tensor(_rng(seed).standard_normal((4, 16)) * 5 + 3), p).data
    err = max(float(np.abs(y.mean(-1)).max()), float(np.abs(y.var(-1) - 1).max()))
    return err < 1e-3, f"max moment error {err:.1e}"


def check_pool_window_local(seed=0):
    from .nn import adaptive_avgpool, upsample_nearest
    from .tensor import Tensor
    H, k, s = 14, 7, 2
    n = H // k
    vals = _rng(seed).standard_normal((n, n))
    x = np.kron(vals, np.ones((k, k)))[None, None]
    g = adaptive_avgpool(Tensor(x), n * s).data[0, 0]
    ok = np.allclose(g, np.kron(vals, np.ones((s, s))))
    up = upsample_nearest(Tensor(g[None, None]), H).data[0, 0]
    ok = ok and np.allclose(up, x[0, 0])
    return bool(ok), "pool/upsample never mix windows (H=14, k=7, L=4)"


def check_attention_rows(seed=0):
    from .attention import capture_attention
    from .hat import HatStageConfig, hat_stage, init_hat_stage
    from .params import ParamFactory
    from .probes import random_input
    cfg = HatStageConfig(H=14, d=8, k=7, L=4, heads=2)
    p = init_hat_stage(cfg, ParamFactory(seed))
    with capture_attention() as maps:
        hat_stage(random_input(cfg, seed), cfg, p)
    shapes = sorted({m.shape[-1] for m in maps})
    err = max(float(np.abs(m.sum(-1) - 1).max()) for m in maps)
    return shapes == [16, 53] and err < 1e-12, f"map sizes {shapes}, row-sum err {err:.1e}"


def check_window_isolation(seed=0):
    from .hat import HatStageConfig
    from .probes import window_block_influence
    cfg = HatStageConfig(H=14, d=8, k=7, L=4, heads=2, use_layerscale=False)
    res, ct_out = window_block_influence(cfg, seed, window=1)
    ok = res.outside == 0.0 and ct_out == 0.0 and res.inside > 0
    return ok, f"outside-window change {res.outside:.1e}, other CTs {ct_out:.1e}"


def check_cross_window(seed=0):
    from .hat import HatStageConfig
    from .probes import ct_pair_influence
    cfg = HatStageConfig(H=14, d=8, k=7, L=4, heads=2, use_layerscale=False,
                         use_ct_conv=False)
    res = ct_pair_influence(cfg, seed, window=0)
    m = float(np.delete(res.change, 0).min())
    return m > 1e-12, f"min change in other windows {m:.1e}"


def check_l0_equivalence(seed=0):
    from .hat import HatStageConfig
    from .probes import l0_equivalence
    same = l0_equivalence(HatStageConfig(H=14, d=8, k=7, L=0, heads=2, depth=2), 10, seed)
    return same == 10, f"{same}/10 bit-identical"


def check_counter_vs_formula(seed=0):
    from .complexity import report
    worst = 0.0
    for attn, H, k, L in (("full", 16, 4, 0), ("window", 32, 8, 0), ("hat", 28, 7, 4),
                          ("hat", 16, 4, 0), ("twins", 32, 8, 0)):
        r = report(attn, H, 16, k, L, heads=2)
        worst = max(worst, r.rel_diff)
    return worst <= 0.01, f"max rel diff {worst:.2e} over 5 configs"


def check_extra_factors(seed=0):
    from .complexity import flops_hat, flops_twins
    a = flops_hat(32, 8, 64, 4).extra_factor
    b = flops_twins(32, 8, 64).extra_factor
    return a == 8 and b == 16, f"HAT {a}, Twins {b}"


def check_archive(seed=0, corrupt_byte: int | None = None):
    from .archive import decode, encode
    from .model import build_variant, get_variant
    from .params import named_tensors
    model = build_variant(get_variant("faster_vit_1").scaled(16), seed=seed)
    blob = bytearray(encode(model))
    if corrupt_byte is not None:
        blob[corrupt_byte % len(blob)] ^= 0xFF
    try:
        loaded = decode(bytes(blob))
    except HatBenchError as e:
        return False, f"{type(e).__name__}: {e}"
    ref = dict(named_tensors(model))
    if set(loaded) != set(ref):
        return False, "tensor names differ"
    for name, t in ref.items():
        if loaded[name].tobytes() != t.data.tobytes():
            return False, f"tensor {name} differs after reload"
    if encode(loaded) != bytes(blob):
        return False, "save(load(save(m))) is not byte-identical"
    return True, f"{len(ref)} tensors, {len(blob)} bytes bit-exact"


def check_config_errors(seed=0):
    from .config import config_from_dict
    cases = [({"H": 14, "k": 5, "d": 8}, "k_divides_H"),
             ({"H": 14, "k": 7, "d": 8, "L": 3}, "L_perfect_square"),
             ({"H": 14, "k": 7, "d": 6, "heads": 4}, "heads_divide_d"),
             ({"H": 14, "k": 7, "d": 8, "window": 7}, "unknown_key:window"),
             ({"variant": "faster_vit_9"}, "known_variant")]
    for doc, want in cases:
        try:
            config_from_dict(doc)
        except ConfigError as e:
            if e.constraint != want:
                return False, f"{doc}: got {e.constraint}, want {want}"
        else:
            return False, f"{doc} was accepted"
    return True, f"{len(cases)} invalid configs rejected with named constraint"


def check_gradients(seed=0):
    from .probes import preset, stage_gradcheck
    errs = stage_gradcheck(preset("hat-tiny"), seed, eps=1e-4, max_entries=6)
    worst = max(errs.values())
    return worst < 1e-4, f"max rel err {worst:.1e} over {len(errs)} tensors (sampled)"


def check_equivariance(seed=0):
    from .hat import HatStageConfig
    from .probes import equivariance_errors
    errs = equivariance_errors(HatStageConfig(H=14, d=8, k=7, L=4, heads=2), 3, seed)
    return max(errs) <= 1e-6, f"max err {max(errs):.1e} over 3 window permutations"


def check_relbias_cache(seed=0):
    from .attention import RelBiasMlp, grid_coords, relbias_table
    from .params import ParamFactory
    p = RelBiasMlp.init(ParamFactory(seed), heads=2, hidden=8)
    c = grid_coords(4)
    a = relbias_table(p, c).data.copy()
    b = relbias_table(p, c).data
    p.w1.data[0, 0] += 0.5
    fresh = relbias_table(p, c).data
    ok = np.array_equal(a, b) and p.hits == 1 and not np.array_equal(a, fresh)
    return ok, f"hits={p.hits}, misses={p.misses}; weight change invalidates"


def check_archive_file(seed=0):
    from .archive import load_into, load_weights, save_weights
    from .hat import HatStageConfig, init_hat_stage
    from .params import ParamFactory, named_tensors
    cfg = HatStageConfig(H=14, d=8, k=7, L=4, heads=2)
    src = init_hat_stage(cfg, ParamFactory(seed))
    dst = init_hat_stage(cfg, ParamFactory(seed + 1))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "stage.hatw"
        save_weights(src, path)
        load_into(dst, load_weights(path))
    ok = all(np.array_equal(a.data, b.data)
             for (_, a), (_, b) in zip(named_tensors(src), named_tensors(dst)))
    return ok, "file save/load_into restores a stage"


CHECKS: dict[str, Callable[..., tuple[bool, str]]] = {
    "window_partition_roundtrip": check_window_roundtrip,
    "softmax_normalized": check_softmax,
    "layernorm_moments": check_layernorm,
    "pool_upsample_window_local": check_pool_window_local,
    "attention_rows_and_shapes": check_attention_rows,
    "window_block_isolation": check_window_isolation,
    "ct_cross_window_influence": check_cross_window,
    "l0_equals_windowed": check_l0_equivalence,
    "counter_matches_formula": check_counter_vs_formula,
    "complexity_extra_factors": check_extra_factors,
    "archive_roundtrip": check_archive,
    "archive_file_load_into": check_archive_file,
    "config_errors_named": check_config_errors,
    "gradients_finite_difference": check_gradients,
    "window_permutation_equivariance": check_equivariance,
    "relbias_cache_consistency": check_relbias_cache,
}


def run_checks(names=None, seed: int = 0, corrupt_byte: int | None = None,
               emit: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        fn = CHECKS[name]
        t0 = time.perf_counter()
        try:
            if name == "archive_roundtrip":
                ok, detail = fn(seed, corrupt_byte)
            else:
                ok, detail = fn(seed)
        except Exception as e:  # a crash is a failed property, reported on its line
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        res = CheckResult(name, bool(ok), detail, time.perf_counter() - t0)
        if emit is not None:
            emit(res.line())
        results.append(res)
    return results
