"""Binary named-tensor archive ("HATW", version 1).

Layout, all integers little-endian::

    b"HATW" | u32 version | u64 count
    count x ( u32 name_len | name (utf-8) | u8 dtype | u8 rank | u64 dims[rank] | u64 offset )
    data section: raw little-endian tensor bytes

``dtype`` is 0 for f32 and 1 for f64. ``offset`` counts bytes from the start
of the data section; tensors are stored back to back in table order, so the
offsets ascend and never overlap. No compression, no padding.
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import DimensionError, FormatError, IntegrityError
from .params import named_tensors
from .tensor import Tensor

MAGIC = b"HATW"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _as_mapping(obj) -> dict[str, np.ndarray]:
    if isinstance(obj, Mapping):
        items = obj.items()
    else:
        items = named_tensors(obj)
    out = {}
    for name, t in items:
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        if arr is None:
            raise FormatError(f"tensor {name!r} is shape-only and has no data to save")
        if arr.dtype not in _CODES:
            raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        out[name] = arr
    return out


def encode(obj) -> bytes:
    """Serialize a parameter tree or a ``{name: array}`` mapping."""
    tensors = _as_mapping(obj)
    head = [MAGIC, struct.pack("<IQ", VERSION, len(tensors))]
    data = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()
        bname = name.encode("utf-8")
        head.append(struct.pack("<I", len(bname)) + bname)
        head.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        head.append(struct.pack("<Q", offset))
        data.append(raw)
        offset += len(raw)
    return b"".join(head + data)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str):
        n = struct.calcsize(fmt)
        if self.pos + n > len(self.buf):
            raise IntegrityError(f"archive truncated at byte {self.pos} (needed {n} more)")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += n
        return vals

    def bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError(f"archive truncated at byte {self.pos} (needed {n} more)")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b


def decode(buf: bytes) -> dict[str, np.ndarray]:
    """Parse archive bytes into ``{name: array}`` (read-only arrays, native order)."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.pos = 4
    version, n = r.take("<IQ")
    if version != VERSION:
        raise FormatError(f"unsupported archive version {version}")
    table = []
    for _ in range(n):
        (ln,) = r.take("<I")
        try:
            name = r.bytes(ln).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"tensor name is not utf-8: {e}") from None
        code, rank = r.take("<BB")
        if code not in _DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        dims = r.take(f"<{rank}Q")
        (offset,) = r.take("<Q")
        table.append((name, _DTYPES[code], dims, offset))
    base = r.pos
    out = {}
    expect = 0
    for name, dt, dims, offset in table:
        if name in out:
            raise IntegrityError(f"duplicate tensor name {name!r}")
        if offset != expect:
            raise IntegrityError(f"tensor {name!r}: offset {offset}, expected {expect}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if base + offset + nbytes > len(buf):
            raise IntegrityError(f"tensor {name!r}: dims {dims} need {nbytes} bytes, "
                                 f"only {len(buf) - base - offset} remain")
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=base + offset)
        out[name] = arr.reshape(dims).astype(dt.newbyteorder("="), copy=False)
        expect = offset + nbytes
    if base + expect != len(buf):
        raise IntegrityError(f"{len(buf) - base - expect} trailing bytes after data section")
    return out


def save_weights(obj, path) -> None:
    """Write a parameter tree (or mapping) to ``path`` atomically."""
    blob = encode(obj)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode(f.read())


def load_into(obj, weights: Mapping[str, np.ndarray]) -> None:
    """Copy archived arrays into the matching tensors of a parameter tree.

    Every tensor of ``obj`` must be present with identical shape and dtype;
    extra archive entries are an error too.
    """
    targets = dict(named_tensors(obj))
    missing = sorted(set(targets) - set(weights))
    extra = sorted(set(weights) - set(targets))
    if missing or extra:
        raise IntegrityError(f"archive/model mismatch: missing={missing[:5]} extra={extra[:5]}")
    for name, t in targets.items():
        arr = weights[name]
        if arr.shape != t.shape or arr.dtype != t.dtype:
            raise DimensionError(f"{name}: archive {arr.shape}/{arr.dtype} vs "
                                 f"model {t.shape}/{t.dtype}")
        t.data = np.array(arr, dtype=t.dtype)
