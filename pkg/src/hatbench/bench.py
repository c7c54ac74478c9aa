"""Wall-clock microbenchmarks of attention kernels and whole networks (CPU, f32)."""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError

DISCLAIMER = ("note: desk-scale CPU timings of a numpy reference implementation; "
              "not comparable to published GPU throughput figures")

BENCH_COLUMNS = ("config_id", "batch", "warmup", "iters", "median_ns", "p10_ns", "p90_ns",
                 "items_per_sec")


@dataclass
class BenchResult:
    config_id: str
    warmup: int
    iters: int
    batch: int
    samples_ns: list[int] = field(default_factory=list)
    workers: int = 1

    def __post_init__(self):
        if len(self.samples_ns) != self.iters:
            raise ValueError(f"{len(self.samples_ns)} samples for {self.iters} iterations")

    @property
    def median_ns(self) -> float:
        return float(np.median(self.samples_ns))

    @property
    def p10_ns(self) -> float:
        return float(np.percentile(self.samples_ns, 10))

    @property
    def p90_ns(self) -> float:
        return float(np.percentile(self.samples_ns, 90))

    @property
    def items_per_sec(self) -> float:
        return self.batch / (self.median_ns * 1e-9)

    def to_row(self) -> dict:
        return {c: getattr(self, c) for c in BENCH_COLUMNS}

    def to_dict(self) -> dict:
        row = self.to_row()
        row.update(samples_ns=list(self.samples_ns), workers=self.workers)
        return row


def worker_count(parallel: int | None = None) -> int:
    """Worker threads: HATBENCH_THREADS wins, then ``parallel``, then 1."""
    env = os.environ.get("HATBENCH_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"HATBENCH_THREADS={env!r} is not an integer",
                              "threads_integer") from None
    else:
        n = 1 if parallel is None else parallel
    if n < 1:
        raise ConfigError(f"worker count {n} must be >= 1", "threads_positive")
    return n


def run_bench(item_fn: Callable[[int], object], config_id: str, batch: int = 1,
              warmup: int = 1, iters: int = 5, workers: int = 1) -> BenchResult:
    """Time ``iters`` evaluations of a batch after ``warmup`` untimed ones.

    ``item_fn(i)`` evaluates batch item ``i``. With one worker the whole batch
    is evaluated in order; otherwise items are spread over a thread pool.
    """
    if iters < 1 or warmup < 0 or batch < 1:
        raise ConfigError(f"need iters>=1, warmup>=0, batch>=1 "
                          f"(got {iters}, {warmup}, {batch})", "bench_counts")
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def once():
        if pool is None:
            for i in range(batch):
                item_fn(i)
        else:
            list(pool.map(item_fn, range(batch)))

    try:
        for _ in range(warmup):
            once()
        samples = []
        for _ in range(iters):
            t0 = time.perf_counter_ns()
            once()
            samples.append(time.perf_counter_ns() - t0)
    finally:
        if pool is not None:
            pool.shutdown()
    return BenchResult(config_id, warmup, iters, batch, samples, workers)


def attention_workload(attn: str, H: int, d: int, k: int | None = None, L: int = 4,
                       heads: int = 2, sub_ratio: int | None = None, batch: int = 1,
                       seed: int = 0) -> tuple[str, Callable[[int], object]]:
    """(config id, per-item callable) for one attention layer in f32.

    ``hat`` runs a one-block HAT stage; the others run a single attention op.
    Inputs are drawn once from ``seed``.
    """
    from .attention import MhsaParams, full_attention, twins_attention, windowed_attention
    from .hat import HatStageConfig, hat_stage, init_hat_stage
    from .params import ParamFactory
    from .tensor import Tensor

    pf = ParamFactory(seed, "f32")
    rng = np.random.default_rng(seed + 1)
    xs = [rng.standard_normal((1, H, H, d)).astype(np.float32) for _ in range(batch)]
    kk = H if k is None else k
    cid = f"{attn}-H{H}-k{kk}-d{d}-L{L if attn == 'hat' else 0}-h{heads}"
    if attn == "hat":
        cfg = HatStageConfig(H=H, d=d, k=kk, L=L, heads=heads, depth=1)
        p = init_hat_stage(cfg, pf)
        return cid, lambda i: hat_stage(Tensor(xs[i]), cfg, p)
    p = MhsaParams.init(pf, d, heads)
    if attn == "full":
        return cid, lambda i: full_attention(Tensor(xs[i]).reshape(1, H * H, d), p)
    if attn == "window":
        return cid, lambda i: windowed_attention(Tensor(xs[i]), kk, p)
    if attn == "twins":
        s = kk if sub_ratio is None else sub_ratio
        return cid, lambda i: twins_attention(Tensor(xs[i]), kk, s, p)
    raise ConfigError(f"unknown attention kind {attn!r}", "attn_kind")


def variant_workload(spec, batch: int = 1, seed: int = 0,
                     input_size: int | None = None) -> tuple[str, Callable[[int], object]]:
    import dataclasses

    from .model import build_variant, forward
    from .tensor import Tensor

    size = spec.input_size if input_size is None else input_size
    spec = dataclasses.replace(spec, input_size=size)
    model = build_variant(spec, seed=seed, dtype="f32")
    rng = np.random.default_rng(seed + 1)
    xs = [rng.standard_normal((1, spec.in_chans, size, size)).astype(np.float32)
          for _ in range(batch)]
    return f"{spec.name}-{size}", lambda i: forward(model, Tensor(xs[i]))
