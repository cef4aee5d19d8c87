"""Dense float64 tensors with a reverse-mode autodiff tape.

Primitives execute eagerly on numpy buffers. While a :class:`Tape` is active,
any primitive whose inputs require gradients appends a node holding
vector-Jacobian closures; :func:`backward` replays the tape in exact reverse
order and accumulates into ``Tensor.grad``. Float64 is the default precision
so the central-difference checker in :func:`grad_check` has enough headroom
to resolve errors below 1e-7.

Also hosts the small binary tensor format used for datasets and checkpoints
(magic ``MSTN``) and a thin complex-array wrapper for the signal-synthesis
code, which never participates in autodiff.
"""

from __future__ import annotations

import math
import struct
from typing import Callable, Sequence

import numpy as np
from scipy import special

_TAPES: list["Tape"] = []
_CHECK_FINITE = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the per-primitive NaN/Inf assertion; returns the prior setting."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return prev


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager around the forward computation, then hand to
    :func:`backward`. A tape is meant to live for a single step; call
    :meth:`clear` (or drop the object) before the next forward.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


class _Node:
    __slots__ = ("out", "vjps")

    def __init__(self, out: "Tensor", vjps) -> None:
        self.out = out
        self.vjps = vjps  # list of (input Tensor, g_out -> g_input)


class Tensor:
    """A dense row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item: tensor is not scalar")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; floats/arrays are wrapped as constants
    def __add__(self, other):
        return add(self, astensor(other))

    def __radd__(self, other):
        return add(astensor(other), self)

    def __sub__(self, other):
        return sub(self, astensor(other))

    def __rsub__(self, other):
        return sub(astensor(other), self)

    def __mul__(self, other):
        return mul(self, astensor(other))

    def __rmul__(self, other):
        return mul(astensor(other), self)

    def __truediv__(self, other):
        return div(self, astensor(other))

    def __rtruediv__(self, other):
        return div(astensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, astensor(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, out_data: np.ndarray, vjps) -> Tensor:
    """Wrap an op result, assert finiteness, and record on the active tape."""
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{op}: non-finite values in output")
    out = Tensor(out_data)
    if _TAPES:
        tracked = [(t, fn) for t, fn in vjps if t.requires_grad]
        if tracked:
            out.requires_grad = True
            _TAPES[-1].nodes.append(_Node(out, tracked))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g if g.shape == shape else g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    return _emit(
        "add",
        a.data + b.data,
        [(a, lambda g: _unbroadcast(g, a.data.shape)),
         (b, lambda g: _unbroadcast(g, b.data.shape))],
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _emit(
        "sub",
        a.data - b.data,
        [(a, lambda g: _unbroadcast(g, a.data.shape)),
         (b, lambda g: _unbroadcast(-g, b.data.shape))],
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _emit(
        "mul",
        a.data * b.data,
        [(a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
         (b, lambda g: _unbroadcast(g * a.data, b.data.shape))],
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    return _emit(
        "div",
        a.data / b.data,
        [(a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
         (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))],
    )


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, [(a, lambda g: -g)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = np.matmul(a.data, b.data)

    def vjp_a(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        return _unbroadcast(ga, a.data.shape)

    def vjp_b(g):
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(gb, b.data.shape)

    return _emit("matmul", out, [(a, vjp_a), (b, vjp_b)])


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), [(a, lambda g: g.transpose(inv))])


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _emit("reshape", a.data.reshape(shape), [(a, lambda g: g.reshape(a.data.shape))])


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(parts) == 0:
        raise ValueError("concat: empty input")
    datas = [p.data for p in parts]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return _emit(
        "concat",
        np.concatenate(datas, axis=axis),
        [(p, make_vjp(i)) for i, p in enumerate(parts)],
    )


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0; gradient scatter-adds back (duplicates ok)."""
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return _emit("gather_rows", a.data[idx], [(a, vjp)])


def index_add(base: Tensor, idx, vals: Tensor) -> Tensor:
    """Return base with vals scatter-added at rows idx (axis 0)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = base.data.copy()
    np.add.at(out, idx, vals.data)
    return _emit("index_add", out, [(base, lambda g: g), (vals, lambda g: g[idx])])


def take_along_last(a: Tensor, idx) -> Tensor:
    """Gather along the last axis of a 2D tensor; idx is [N, k] ints."""
    if a.data.ndim != 2:
        raise ValueError("take_along_last: expected a 2D tensor")
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])[:, None]

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, idx), g)
        return out

    return _emit("take_along_last", a.data[rows, idx], [(a, vjp)])


def scatter_last(vals: Tensor, idx, width: int) -> Tensor:
    """Inverse of take_along_last: place [N, k] vals into a dense [N, width]."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(vals.data.shape[0])[:, None]
    out = np.zeros((vals.data.shape[0], width))
    np.add.at(out, (rows, idx), vals.data)
    return _emit("scatter_last", out, [(vals, lambda g: g[rows, idx])])


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).copy()

    return _emit("sum", a.data.sum(axis=axis, keepdims=keepdims), [(a, vjp)])


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, a.data.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / n, a.data.shape).copy()

    return _emit("mean", a.data.mean(axis=axis, keepdims=keepdims), [(a, vjp)])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, [(a, lambda g: g * out)])


def log(a: Tensor) -> Tensor:
    return _emit("log", np.log(a.data), [(a, lambda g: g / a.data)])


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit("sqrt", out, [(a, lambda g: g * 0.5 / out)])


def square(a: Tensor) -> Tensor:
    return _emit("square", a.data * a.data, [(a, lambda g: g * 2.0 * a.data)])


def sin(a: Tensor) -> Tensor:
    return _emit("sin", np.sin(a.data), [(a, lambda g: g * np.cos(a.data))])


def cos(a: Tensor) -> Tensor:
    return _emit("cos", np.cos(a.data), [(a, lambda g: -g * np.sin(a.data))])


def erf(a: Tensor) -> Tensor:
    out = special.erf(a.data)

    def vjp(g):
        return g * (2.0 / math.sqrt(math.pi)) * np.exp(-a.data * a.data)

    return _emit("erf", out, [(a, vjp)])


def gelu(a: Tensor) -> Tensor:
    """Exact GELU x * Phi(x) with the Gaussian CDF, not the tanh fit."""
    x = a.data
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("gelu: non-finite values in input")
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return g * (cdf + x * pdf)

    return _emit("gelu", x * cdf, [(a, vjp)])


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _emit("softmax", out, [(a, vjp)])


# ---------------------------------------------------------------------------
# composites (built from primitives, so gradients come for free)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2, last axis) + eps) * gain."""
    ms = tmean(square(x), axis=-1, keepdims=True)
    return mul(div(x, sqrt(add(ms, Tensor(eps)))), gain)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def logsumexp_rows(x: Tensor) -> Tensor:
    """Row-wise log(sum(exp(x))) for a 2D tensor; max-shifted for stability."""
    m = Tensor(x.data.max(axis=-1, keepdims=True))  # constant shift
    return add(log(tsum(exp(sub(x, m)), axis=-1, keepdims=True)), m)


# ---------------------------------------------------------------------------
# backward and the finite-difference checker


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(input) into .grad for every tracked tensor."""
    if loss.data.size != 1:
        raise ValueError("backward: loss must be scalar")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for t, vjp in node.vjps:
            gi = vjp(g)
            t.grad = gi if t.grad is None else t.grad + gi


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare tape gradients of f() against central differences.

    f must be deterministic (it is evaluated repeatedly at perturbed
    parameter values) and must read the live ``.data`` of params. Returns the
    max relative error |analytic - numeric| / max(1, |analytic|, |numeric|)
    over the checked coordinates; all coordinates are checked unless
    coords_per_param caps the per-tensor sample.
    """
    if not (1e-6 <= h <= 1e-4):
        raise ValueError("grad_check: h must lie in [1e-6, 1e-4]")
    l0 = f().data.copy()
    l1 = f().data.copy()
    if not np.array_equal(l0, l1):
        raise ValueError("grad_check: f is not deterministic")

    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p in params:
        n = p.data.size
        if coords_per_param is None or coords_per_param >= n:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=coords_per_param, replace=False)
        flat = p.data.reshape(-1)
        gflat = None if p.grad is None else p.grad.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            lp = float(f().data)
            flat[c] = orig - h
            lm = float(f().data)
            flat[c] = orig
            numeric = (lp - lm) / (2.0 * h)
            analytic = 0.0 if gflat is None else float(gflat[c])
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# complex wrapper for signal synthesis (no autodiff)


class ComplexTensor:
    """Thin wrapper over a complex128 numpy array.

    Exists so synthesis code has a single currency for complex data and a
    direct bridge into the real-valued model domain (re/im stacked on a
    trailing axis).
    """

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        self.data = np.asarray(data, dtype=np.complex128)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def re(self) -> np.ndarray:
        return self.data.real

    @property
    def im(self) -> np.ndarray:
        return self.data.imag

    def to_real(self) -> np.ndarray:
        """Stack (re, im) on a new trailing axis: [...,] -> [..., 2]."""
        return np.stack([self.data.real, self.data.imag], axis=-1)

    def __repr__(self) -> str:
        return f"ComplexTensor(shape={self.data.shape})"


# ---------------------------------------------------------------------------
# binary tensor serialization (little-endian, magic "MSTN")

_MAGIC = b"MSTN"
_FORMAT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<c16")}
_TAG_FOR_KIND = {("f", 8): 0, ("f", 4): 1, ("c", 16): 2}


def mstn_dumps(array: np.ndarray) -> bytes:
    """Serialize a float32/float64/complex128 array: magic, version, rank,
    extents (u64 each), dtype tag, then the raw row-major little-endian
    buffer."""
    arr = np.asarray(array)
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _TAG_FOR_KIND:
        raise ValueError(f"write_mstn: unsupported dtype {arr.dtype}")
    tag = _TAG_FOR_KIND[key]
    arr = arr.astype(_DTYPE_TAGS[tag], copy=False)  # tobytes() emits C order
    header = struct.pack("<4sII", _MAGIC, _FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    header += struct.pack("<I", tag)
    return header + arr.tobytes()


def write_mstn(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(mstn_dumps(array))


def read_mstn(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    return mstn_loads(blob)


def mstn_loads(blob: bytes) -> np.ndarray:
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise ValueError("read_mstn: bad magic")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != _FORMAT_VERSION:
        raise ValueError(f"read_mstn: unsupported version {version}")
    off = 12
    extents = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
    off += 8 * rank
    (tag,) = struct.unpack_from("<I", blob, off)
    off += 4
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"read_mstn: unknown dtype tag {tag}")
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(extents, dtype=np.int64)) if rank else 1
    expected = off + count * dtype.itemsize
    if len(blob) != expected:
        raise ValueError("read_mstn: truncated or oversized payload")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
    return arr.reshape(extents).copy()
