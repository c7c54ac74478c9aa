"""Dense row-major tensors with tape-based reverse-mode autodiff.

Kernels are thin wrappers around numpy arrays. Every differentiable op records
itself on the active :class:`Tape` (if any input requires a gradient) together
with a closure computing the vector-Jacobian product.

Broadcasting is deliberately narrow: two operands must either have equal
shapes or one shape must be a suffix of the other. Anything else needs an
explicit :func:`expand`.

Tensors may also be *meta* tensors (``data is None``): they carry only a shape
and dtype, so a forward pass over them walks the exact code path, counts MACs,
and allocates nothing. This is what lets the FLOP model instrument attention
at resolutions whose score matrices would not fit in memory.
"""
from __future__ import annotations

import math
import threading
from collections import Counter
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, UsageError

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
DEFAULT_DTYPE = DTYPES["f64"]

_local = threading.local()


def _stack(name: str) -> list:
    s = getattr(_local, name, None)
    if s is None:
        s = []
        setattr(_local, name, s)
    return s


def as_dtype(dtype) -> np.dtype:
    if dtype is None:
        return DEFAULT_DTYPE
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    dt = np.dtype(dtype)
    if dt not in DTYPES.values():
        raise TypeError(f"unsupported dtype {dt}; use f32 or f64")
    return dt


# ---------------------------------------------------------------- MAC counter


class MacCounter:
    """Multiply-accumulate tally, split by the tag active at count time."""

    def __init__(self):
        self.by_tag: Counter = Counter()

    @property
    def total(self) -> int:
        return sum(self.by_tag.values())

    def sum(self, tags: Iterable[str]) -> int:
        return sum(self.by_tag.get(t, 0) for t in tags)

    def __repr__(self):
        return f"MacCounter(total={self.total}, by_tag={dict(self.by_tag)})"


@contextmanager
def count_macs():
    """Enable MAC instrumentation for the enclosed block (nestable)."""
    counter = MacCounter()
    stack = _stack("counters")
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


@contextmanager
def mac_tag(tag: str):
    """Attribute MACs counted inside the block to ``tag``."""
    stack = _stack("tags")
    stack.append(tag)
    try:
        yield
    finally:
        stack.pop()


def add_macs(n: int) -> None:
    counters = _stack("counters")
    if not counters:
        return
    tags = _stack("tags")
    tag = tags[-1] if tags else "other"
    for c in counters:
        c.by_tag[tag] += int(n)


# ---------------------------------------------------------------- tape


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    Use as a context manager; ops run inside the block are recorded, and
    :meth:`backward` replays them in reverse. A tape belongs to the thread
    that entered it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self):
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc):
        _stack("tapes").remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: "Tensor", inputs: Sequence["Tensor"], backward) -> None:
        self.nodes.append(_Node(out, tuple(inputs), backward))
        self._produced.add(id(out))

    def backward(self, loss: "Tensor") -> None:
        backward(self, loss)


def current_tape() -> Tape | None:
    tapes = _stack("tapes")
    return tapes[-1] if tapes else None


@contextmanager
def no_grad():
    """Suspend recording on every active tape."""
    saved = list(_stack("tapes"))
    _stack("tapes").clear()
    try:
        yield
    finally:
        _stack("tapes").extend(saved)


def backward(tape: Tape, loss: "Tensor") -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Gradients accumulate: calling this twice without zeroing doubles them.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = id(loss) in tape._produced
    if not produced and not loss.requires_grad:
        raise UsageError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, loss.dtype)}
    leaves: dict[int, Tensor] = {}
    if not produced:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in tape._produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------- tensor


class Tensor:
    """A dense n-d array that can participate in a gradient tape."""

    __slots__ = ("data", "shape", "dtype", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in DTYPES.values():
            dt = data.dtype
        else:
            dt = as_dtype(dtype)
        arr = _contig(np.asarray(data, dtype=dt))
        self.data = arr
        self.shape = tuple(arr.shape)
        self.dtype = dt
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def meta(cls, shape, dtype=None, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = None
        t.shape = tuple(int(s) for s in shape)
        t.dtype = as_dtype(dtype)
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _contig(arr)
        t.shape = tuple(t.data.shape)
        t.dtype = t.data.dtype
        t.requires_grad = False
        t.grad = None
        return t

    # -- introspection
    @property
    def is_meta(self) -> bool:
        return self.data is None

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def numpy(self) -> np.ndarray:
        if self.data is None:
            raise UsageError("meta tensor has no data")
        return self.data

    def item(self) -> float:
        return float(self.numpy().reshape(-1)[0]) if self.size == 1 else _bad_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        if self.data is None:
            return Tensor.meta(self.shape, self.dtype)
        return Tensor._wrap(self.data.copy())

    def __repr__(self):
        if self.data is None:
            return f"Tensor(meta, shape={self.shape}, dtype={self.dtype})"
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    # -- operators
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self, a: int = -2, b: int = -1):
        return swapaxes(self, a, b)

    def expand(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return expand(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def _contig(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return arr if arr.flags.c_contiguous else np.array(arr, order="C")


def _bad_item(t):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, as_dtype(dtype)), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, as_dtype(dtype)), requires_grad=requires_grad)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise TypeError(f"dtype mismatch: {x.dtype} vs {like.dtype}")
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.dtype))


def record(out: np.ndarray | None, shape, dtype, inputs: Sequence[Tensor],
           backward: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap a kernel result and register its backward rule on the active tape.

    ``out`` is None when any input is a meta tensor; the result is then meta.
    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    if out is None:
        return Tensor.meta(shape, dtype)
    t = Tensor._wrap(out)
    tape = current_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        tape.record(t, inputs, backward)
    return t


def any_meta(*ts: Tensor) -> bool:
    return any(t.data is None for t in ts)


# ---------------------------------------------------------------- elementwise


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise DimensionError(
        f"shapes {a} and {b} are not trailing-aligned; use expand() explicitly")


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead > 0 or shape == () else g


def _binary(a, b, fwd, ga, gb) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    shape = broadcast_shape(a.shape, b.shape)
    if any_meta(a, b):
        return Tensor.meta(shape, a.dtype)
    out = fwd(a.data, b.data)

    def bw(g):
        return (unbroadcast(ga(g, a.data, b.data, out), a.shape) if a.requires_grad else None,
                unbroadcast(gb(g, a.data, b.data, out), b.shape) if b.requires_grad else None)

    return record(out, shape, a.dtype, (a, b), bw)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide, lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * o / y)


def _unary(a: Tensor, fwd, grad) -> Tensor:
    if a.data is None:
        return Tensor.meta(a.shape, a.dtype)
    out = fwd(a.data)
    return record(out, a.shape, a.dtype, (a,), lambda g: (grad(g, a.data, out),))


def neg(a: Tensor) -> Tensor:
    return _unary(a, np.negative, lambda g, x, o: -g)


def exp(a: Tensor) -> Tensor:
    return _unary(a, np.exp, lambda g, x, o: g * o)


def log(a: Tensor) -> Tensor:
    if a.data is not None and np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _unary(a, np.log, lambda g, x, o: g / x)


def sqrt(a: Tensor) -> Tensor:
    if a.data is not None and np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    return _unary(a, np.sqrt, lambda g, x, o: g * 0.5 / o)


def power(a: Tensor, p: float) -> Tensor:
    return _unary(a, lambda x: x ** p, lambda g, x, o: g * p * x ** (p - 1))


# ---------------------------------------------------------------- matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    ``b`` is either a plain matrix shared by every batch entry of ``a`` or has
    exactly the same batch dims as ``a``. Counts batch*M*K*N MACs.
    """
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    M, K = a.shape[-2:]
    K2, N = b.shape[-2:]
    if K != K2:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        batch = a.shape[:-2]
    elif a.shape[:-2] == b.shape[:-2]:
        batch = a.shape[:-2]
    else:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    add_macs(math.prod(batch) * M * K * N)
    shape = batch + (M, N)
    if any_meta(a, b):
        return Tensor.meta(shape, a.dtype)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, K).T @ g.reshape(-1, N)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return record(out, shape, a.dtype, (a, b), bw)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = math.prod(s for s in shape if s != -1)
        if known == 0 or a.size % known:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}")
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if math.prod(shape) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    if a.data is None:
        return Tensor.meta(shape, a.dtype)
    src = a.shape
    return record(a.data.reshape(shape), shape, a.dtype, (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) % a.ndim for x in axes) if a.ndim else ()
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {a.shape}")
    shape = tuple(a.shape[i] for i in axes)
    if a.data is None:
        return Tensor.meta(shape, a.dtype)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), shape, a.dtype, (a,),
                  lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return permute(a, axes)


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast ``a`` to ``shape`` (numpy rules, size-1 dims allowed)."""
    shape = tuple(int(s) for s in shape)
    try:
        np.broadcast_shapes(a.shape, shape)
    except ValueError:
        raise DimensionError(f"cannot expand {a.shape} to {shape}") from None
    if np.broadcast_shapes(a.shape, shape) != shape:
        raise DimensionError(f"cannot expand {a.shape} to {shape}")
    if a.data is None:
        return Tensor.meta(shape, a.dtype)
    src = a.shape
    lead = len(shape) - len(src)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return record(np.broadcast_to(a.data, shape).copy(), shape, a.dtype, (a,), bw)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not ts:
        raise DimensionError("concat of empty list")
    first = ts[0]
    ax = axis % first.ndim
    for t in ts[1:]:
        if t.ndim != first.ndim or any(
                t.shape[i] != first.shape[i] for i in range(first.ndim) if i != ax):
            raise DimensionError(f"concat shape mismatch on axis {axis}: "
                                 f"{first.shape} vs {t.shape}")
        if t.dtype != first.dtype:
            raise TypeError("concat dtype mismatch")
    shape = list(first.shape)
    shape[ax] = sum(t.shape[ax] for t in ts)
    shape = tuple(shape)
    if any_meta(*ts):
        return Tensor.meta(shape, first.dtype)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        parts = np.split(g, bounds, axis=ax)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, ts))

    return record(np.concatenate([t.data for t in ts], axis=ax), shape, first.dtype,
                  tuple(ts), bw)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split ``a`` along ``axis`` into consecutive chunks of the given sizes."""
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to {a.shape[ax]}")
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + s)
        out.append(index(a, tuple(idx)))
        start += s
    return out


def index(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing; the gradient scatters back into place."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    for i in idx:
        if not isinstance(i, (int, slice, type(Ellipsis))):
            raise UsageError("only basic slicing is supported; use take() for gathers")
    shape = np.broadcast_to(np.empty((), np.bool_), a.shape)[idx].shape
    if a.data is None:
        return Tensor.meta(shape, a.dtype)

    def bw(g):
        full = np.zeros(a.shape, a.dtype)
        full[idx] = g
        return (full,)

    return record(np.array(a.data[idx]), shape, a.dtype, (a,), bw)


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape."""
    indices = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    shape = a.shape[:ax] + indices.shape + a.shape[ax + 1:]
    if a.data is None:
        return Tensor.meta(shape, a.dtype)

    def bw(g):
        full = np.zeros(a.shape, a.dtype)
        gm = np.moveaxis(g.reshape(a.shape[:ax] + (-1,) + a.shape[ax + 1:]), ax, 0)
        fm = np.moveaxis(full, ax, 0)
        np.add.at(fm, indices.reshape(-1), gm)
        return (full,)

    return record(np.take(a.data, indices, axis=ax), shape, a.dtype, (a,), bw)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(int(x) % ndim for x in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    shape = kshape if keepdims else tuple(s for i, s in enumerate(a.shape) if i not in axes)
    if a.data is None:
        return Tensor.meta(shape, a.dtype)
    src = a.shape
    return record(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), shape, a.dtype,
                  (a,), lambda g: (np.broadcast_to(g.reshape(kshape), src).copy(),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = math.prod(a.shape[i] for i in axes)
    return mul(sum_(a, axes, keepdims), 1.0 / n)


# ---------------------------------------------------------------- softmax


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; each slice along ``axis`` sums to one."""
    if x.data is None:
        return Tensor.meta(x.shape, x.dtype)
    if not np.all(np.isfinite(x.data)):
        raise DomainError("softmax input contains non-finite values")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, x.shape, x.dtype, (x,), bw)


softmax_lastdim = softmax
