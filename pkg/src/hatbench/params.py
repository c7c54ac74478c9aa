"""Parameter creation and traversal helpers.

Parameter containers throughout the package are plain dataclasses whose fields
hold :class:`Tensor` objects, nested dataclasses, lists, or ``None``. The
helpers here walk those trees to produce slash-separated names such as
``stage3/block0/win_attn/wq``.
"""
from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from .tensor import Tensor, as_dtype


class ParamFactory:
    """Creates parameters (``requires_grad=True``) and buffers.

    With ``meta=True`` only shapes are recorded; nothing is allocated. That is
    how full-width variants are audited without materialising ~10^8 floats.
    """

    def __init__(self, seed: int | np.random.Generator = 0, dtype="f64", meta: bool = False):
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.dtype = as_dtype(dtype)
        self.meta = meta

    def _make(self, shape, fill, grad=True) -> Tensor:
        shape = tuple(int(s) for s in shape)
        if self.meta:
            return Tensor.meta(shape, self.dtype, requires_grad=grad)
        return Tensor(fill(shape).astype(self.dtype), requires_grad=grad)

    def trunc_normal(self, shape, std: float = 0.02) -> Tensor:
        def fill(s):
            x = self.rng.standard_normal(s)
            bad = np.abs(x) > 2.0
            while bad.any():
                x[bad] = self.rng.standard_normal(int(bad.sum()))
                bad = np.abs(x) > 2.0
            return x * std
        return self._make(shape, fill)

    def fan_out_normal(self, shape) -> Tensor:
        # conv weight (C_out, C_in, kh, kw)
        fan_out = shape[0] * int(np.prod(shape[2:]))
        std = float(np.sqrt(2.0 / fan_out))
        return self._make(shape, lambda s: self.rng.standard_normal(s) * std)

    def normal(self, shape, std: float = 1.0) -> Tensor:
        return self._make(shape, lambda s: self.rng.standard_normal(s) * std)

    def zeros(self, shape) -> Tensor:
        return self._make(shape, np.zeros)

    def ones(self, shape) -> Tensor:
        return self._make(shape, np.ones)

    def constant(self, shape, value: float) -> Tensor:
        return self._make(shape, lambda s: np.full(s, value))

    def buffer(self, shape, value: float) -> Tensor:
        return self._make(shape, lambda s: np.full(s, value), grad=False)


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(name, tensor)`` for every tensor in a parameter tree."""
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("skip"):
                continue
            yield from named_tensors(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, (list, tuple)):
        parent, _, leaf = prefix.rpartition("/")
        stem = leaf[:-1] if leaf.endswith("s") else leaf
        for i, item in enumerate(obj):
            yield from named_tensors(item, _join(parent, f"{stem}{i}"))
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield from named_tensors(v, _join(prefix, str(k)))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}/{name}" if prefix else name


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    for name, t in named_tensors(obj, prefix):
        if t.requires_grad:
            yield name, t


def parameters(obj) -> list[Tensor]:
    return [t for _, t in named_parameters(obj)]


def count(obj) -> int:
    return sum(t.size for _, t in named_parameters(obj))


def zero_grad(obj) -> None:
    for _, t in named_tensors(obj):
        t.grad = None
