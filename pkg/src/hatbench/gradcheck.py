"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, no_grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max entrywise relative error.

    Each entry is scaled by max(|a|, |n|, 1e-3 * max|n|, floor): entries whose
    gradient is three orders below the tensor's largest are judged against
    that scale instead of their own (tiny, noise-dominated) magnitude.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = max(1e-3 * float(np.abs(n).max()), floor)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), scale)
    return float((np.abs(a - n) / denom).max())


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-4,
                 entries: np.ndarray | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``t`` (perturbed in place).

    ``entries`` restricts the flat indices visited; others are left NaN.
    """
    flat = t.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if entries is None else entries
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2 * eps)
    return out.reshape(t.shape)


def gradcheck(fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-4,
              max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Compare tape gradients of ``fn()`` against finite differences.

    Returns the max relative error per named parameter. With ``max_entries``
    each tensor is checked on a random subset of that many entries.
    """
    for t in params.values():
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in params.items():
        analytic = t.grad if t.grad is not None else np.zeros(t.shape, t.dtype)
        entries = None
        if max_entries is not None and t.size > max_entries:
            entries = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        numeric = numeric_grad(fn, t, eps, entries)
        if entries is None:
            errors[name] = rel_error(analytic, numeric)
        else:
            errors[name] = rel_error(analytic.reshape(-1)[entries], numeric.reshape(-1)[entries])
    return errors
