"""Closed-form attention MAC counts, cross-checked against the instrumented counter.

Counting convention: only multiply-accumulates of matmuls and convolutions
are counted; softmax, norms and activations are free. The "attention" op set
is the Q/K/V/O projections plus the score (QK^T) and value (AV) products,
i.e. the counter tags ``proj``, ``score`` and ``value``. Batch size 1.

Besides exact counts every report carries the asymptotic terms of the
big-O analysis and the *extra factor*: how many H^2 d units a pattern costs
beyond plain k x k windowed attention (HAT: L + H^2 L^2 / k^4; Twins: H^2/k^2).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, count_macs

ATTN_TAGS = ("proj", "score", "value")
ATTN_KINDS = ("full", "window", "hat", "twins")


@dataclass
class FlopReport:
    attn: str
    H: int
    d: int
    k: int | None = None
    L: int = 0
    heads: int = 1
    sub_ratio: int | None = None
    analytical: dict[str, int] = field(default_factory=dict)
    asymptotic: dict[str, Fraction] = field(default_factory=dict)
    instrumented: int | None = None

    @property
    def total(self) -> int:
        return sum(self.analytical.values())

    @property
    def attention_terms(self) -> int:
        """Score + value MACs only (projections excluded)."""
        return sum(v for t, v in self.analytical.items() if not t.endswith("proj"))

    @property
    def asymptotic_total(self) -> Fraction:
        return sum(self.asymptotic.values(), Fraction(0))

    @property
    def ratio_to_full(self) -> float:
        return self.total / flops_full(self.H, self.d).total

    @property
    def extra_factor(self) -> Fraction | None:
        """Asymptotic cost beyond k^2 H^2 d windowed attention, in units of H^2 d."""
        if "local" not in self.asymptotic:
            return None
        extra = sum(self.asymptotic.values()) - self.asymptotic["local"]
        return Fraction(extra, self.H ** 2 * self.d)

    @property
    def rel_diff(self) -> float | None:
        if self.instrumented is None:
            return None
        return abs(self.instrumented - self.total) / self.total

    def to_row(self) -> dict:
        ef = self.extra_factor
        return {"attn": self.attn, "H": self.H, "k": self.k, "d": self.d, "L": self.L,
                "analytical_macs": self.total, "instrumented_macs": self.instrumented,
                "ratio_to_full": self.ratio_to_full,
                "extra_factor": None if ef is None else float(ef)}

    def to_dict(self) -> dict:
        row = self.to_row()
        row.update(heads=self.heads, sub_ratio=self.sub_ratio,
                   terms=dict(self.analytical),
                   asymptotic={k: str(v) for k, v in self.asymptotic.items()})
        return row


def _positive(**kw):
    for name, v in kw.items():
        if v is None or v < 1:
            raise ConfigError(f"{name}={v} must be a positive integer", f"{name}_positive")


def _divides(k: int, H: int, name: str = "k"):
    if H % k:
        raise ConfigError(f"{name}={k} must divide H={H}", f"{name}_divides_H")


def flops_full(H: int, d: int) -> FlopReport:
    """Dense attention over H^2 tokens: 2 H^4 d + 4 H^2 d^2."""
    _positive(H=H, d=d)
    T = H * H
    return FlopReport("full", H, d, k=H, analytical={
        "score": T * T * d, "value": T * T * d, "proj": 4 * T * d * d},
        asymptotic={"full": Fraction(H ** 4 * d)})


def flops_windowed(H: int, k: int, d: int) -> FlopReport:
    """k x k windows: 2 k^2 H^2 d + 4 H^2 d^2."""
    _positive(H=H, k=k, d=d)
    _divides(k, H)
    T = H * H
    return FlopReport("window", H, d, k=k, analytical={
        "score": T * k * k * d, "value": T * k * k * d, "proj": 4 * T * d * d},
        asymptotic={"local": Fraction(k * k * T * d)})


def flops_hat(H: int, k: int, d: int, L: int) -> FlopReport:
    """One HAT block: (k^2+L)-token window attention plus (n_windows*L)-token CT attention.

    Terms: ``local`` (window tokens among themselves), ``cross`` (pairs that
    involve a window's own CTs), ``ct`` (CT self-attention), projections for
    both attentions.
    """
    _positive(H=H, k=k, d=d)
    _divides(k, H)
    if L < 0:
        raise ConfigError(f"L={L} must be >= 0", "L_nonneg")
    nw = (H // k) ** 2
    k2 = k * k
    Tc = nw * L
    terms = {
        "local": 2 * nw * k2 * k2 * d,
        "cross": 2 * nw * (2 * k2 * L + L * L) * d,
        "window_proj": 4 * nw * (k2 + L) * d * d,
        "ct": 2 * Tc * Tc * d,
        "ct_proj": 4 * Tc * d * d,
    }
    asym = {"local": Fraction(k2 * H * H * d), "cross": Fraction(L * H * H * d),
            "ct": Fraction(H ** 4 * L * L * d, k ** 4)}
    return FlopReport("hat", H, d, k=k, L=L, analytical=terms, asymptotic=asym)


def flops_twins(H: int, k: int, d: int, sub_ratio: int | None = None) -> FlopReport:
    """Window queries against a (H/sub_ratio)^2-token pooled key/value map.

    Exact terms count that global sub-sampled attention (which equals full
    attention at sub_ratio=1). The asymptotic terms pair it with the local
    window attention Twins interleaves, k^2 H^2 d + H^4 d / sub_ratio^2;
    sub_ratio defaults to k.
    """
    s = k if sub_ratio is None else sub_ratio
    _positive(H=H, k=k, d=d, sub_ratio=s)
    _divides(k, H)
    _divides(s, H, "sub_ratio")
    T = H * H
    S = (H // s) ** 2
    return FlopReport("twins", H, d, k=k, sub_ratio=s, analytical={
        "score": T * S * d, "value": T * S * d,
        "q_proj": 2 * T * d * d, "kv_proj": 2 * S * d * d},
        asymptotic={"local": Fraction(k * k * T * d), "global": Fraction(T * T * d, s * s)})


def analytical(attn: str, H: int, d: int, k: int | None = None, L: int = 0,
               sub_ratio: int | None = None) -> FlopReport:
    if attn == "full":
        return flops_full(H, d)
    if attn == "window":
        return flops_windowed(H, H if k is None else k, d)
    if attn == "hat":
        return flops_hat(H, k, d, L)
    if attn == "twins":
        return flops_twins(H, k, d, sub_ratio)
    raise ConfigError(f"unknown attention kind {attn!r}", "attn_kind")


# ---------------------------------------------------------------- instrumented


def instrumented_macs(attn: str, H: int, d: int, k: int | None = None, L: int = 0,
                      heads: int = 1, sub_ratio: int | None = None, meta: bool = True,
                      seed: int = 0, dtype="f32") -> int:
    """Run the live kernel once under the MAC counter; return attention-tag MACs.

    ``meta=True`` walks the same code on shape-only tensors, which makes large
    H affordable; ``meta=False`` executes the arithmetic.
    """
    from .attention import MhsaParams, full_attention, twins_attention, windowed_attention
    from .hat import HatStageConfig, hat_stage, init_hat_stage
    from .params import ParamFactory

    pf = ParamFactory(seed, dtype, meta)

    def inp(shape):
        if meta:
            return Tensor.meta(shape, dtype)
        return Tensor(pf.rng.standard_normal(shape), dtype=dtype)

    with count_macs() as counter:
        if attn == "full":
            full_attention(inp((1, H * H, d)), MhsaParams.init(pf, d, heads))
        elif attn == "window":
            windowed_attention(inp((1, H, H, d)), H if k is None else k,
                               MhsaParams.init(pf, d, heads))
        elif attn == "twins":
            twins_attention(inp((1, H, H, d)), k, k if sub_ratio is None else sub_ratio,
                            MhsaParams.init(pf, d, heads))
        elif attn == "hat":
            cfg = HatStageConfig(H=H, d=d, k=k, L=L, heads=heads, depth=1,
                                 drop_ct_single_window=False)
            hat_stage(inp((1, H, H, d)), cfg, init_hat_stage(cfg, pf))
        else:
            raise ConfigError(f"unknown attention kind {attn!r}", "attn_kind")
    return counter.sum(ATTN_TAGS)


def report(attn: str, H: int, d: int, k: int | None = None, L: int = 0, heads: int = 1,
           sub_ratio: int | None = None, instrument: str | None = "meta") -> FlopReport:
    """Analytical report, optionally with the instrumented count filled in.

    ``instrument``: None (skip), "meta" (shape-only run) or "numeric".
    """
    r = analytical(attn, H, d, k, L, sub_ratio)
    r.heads = heads
    if d % heads:
        raise ConfigError(f"heads={heads} must divide d={d}", "heads_divide_d")
    if instrument is not None:
        r.instrumented = instrumented_macs(attn, H, d, r.k, L, heads, r.sub_ratio,
                                           meta=instrument == "meta")
    return r


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepResult:
    reports: list[FlopReport]
    slope: float  # d log(MACs) / d log(H^2)

    @property
    def resolutions(self) -> list[int]:
        return [r.H for r in self.reports]


def loglog_slope(tokens, macs) -> float:
    x = np.log(np.asarray(tokens, np.float64))
    y = np.log(np.asarray(macs, np.float64))
    if x.size < 2:
        return float("nan")
    return float(np.polyfit(x, y, 1)[0])


def scaling_sweep(kind: str, resolutions, k: int = 7, d: int = 64, L: int = 4,
                  heads: int = 2, sub_ratio: int | None = None,
                  instrument: str | None = "meta") -> SweepResult:
    """Attention MACs across resolutions, with the fitted slope against H^2.

    ``kind`` is an attention kind or a registered variant name. For a variant,
    each resolution is an input image size, and the analytical count is the
    sum over HAT stages of depth x one-block HAT MACs.
    """
    if kind in ATTN_KINDS:
        reports = [report(kind, H, d, k, L, heads, sub_ratio, instrument) for H in resolutions]
        return SweepResult(reports, loglog_slope([r.H ** 2 for r in reports],
                                                 [r.total for r in reports]))
    return _variant_sweep(kind, resolutions, instrument)


def _variant_sweep(name: str, resolutions, instrument) -> SweepResult:
    from .model import build_variant, forward, get_variant

    spec = get_variant(name) if isinstance(name, str) else name
    reports = []
    for size in resolutions:
        terms = {}
        for i, st in enumerate(spec.stages):
            if st.kind != "hat":
                continue
            cfg = spec.stage_config(i, size)
            one = flops_hat(cfg.H, cfg.k, cfg.d, cfg.L_eff)
            terms[f"stage{i + 1}"] = one.total * cfg.depth
        r = FlopReport(f"variant:{spec.name}", size, spec.stages[-1].dim, analytical=terms)
        if instrument is not None:
            model = build_variant(dataclasses.replace(spec, input_size=size), meta=True)
            with count_macs() as c:
                forward(model, Tensor.meta((1, spec.in_chans, size, size), "f32"))
            r.instrumented = c.sum(ATTN_TAGS)
        reports.append(r)
    return SweepResult(reports, loglog_slope([r.H ** 2 for r in reports],
                                             [r.total for r in reports]))
