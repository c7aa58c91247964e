"""Minimal reverse-mode differentiation over dense 2-D float64 arrays.

Every value in a graph is a :class:`Tensor` holding a ``(rows, cols)`` array.
Ops record a closure computing the vector-Jacobian product; :func:`backward`
walks the recorded DAG in reverse topological order exactly once.

Learnable arrays live in a :class:`ParamStore`. A graph reads them through
:meth:`ParamStore.leaf`; gradients reaching such a leaf are added into the
store's accumulator during :func:`backward`.

Accumulation guard: ``backward`` refuses to add into a store whose
accumulators were already written and not cleared with
:meth:`ParamStore.zero_grad` (pass ``accumulate=True`` to opt out).
Calling ``backward`` twice on the same loss node is always an error.
"""

from __future__ import annotations

import contextlib
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

MASK_VALUE = -1e30
DTYPE = np.float64


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericError(FloatingPointError):
    pass


class GradientStateError(RuntimeError):
    pass


class MemoryTracker:
    """High-water mark of bytes held by live tensor values and gradients."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> None:
        self.current += nbytes
        if self.current > self.peak:
            self.peak = self.current

    def free(self, nbytes: int) -> None:
        self.current -= nbytes

    def reset_peak(self) -> None:
        self.peak = self.current


MEMORY = MemoryTracker()

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording backward closures."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = (
        "value",
        "grad",
        "kind",
        "parents",
        "backward_fn",
        "requires_grad",
        "param",
        "_done",
        "_nbytes",
        "__weakref__",
    )

    def __init__(self, value, requires_grad: bool = False, kind: str = "leaf"):
        arr = np.asarray(value, dtype=DTYPE)
        if arr.ndim != 2:
            raise ShapeError(kind, arr.shape, detail="tensors are 2-D")
        if not np.isfinite(arr).all():
            raise NumericError(f"{kind}: non-finite entries")
        self.value = arr
        self.grad = None
        self.kind = kind
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.requires_grad = requires_grad
        self.param = None
        self._done = False
        self._nbytes = arr.nbytes
        MEMORY.alloc(self._nbytes)

    def __del__(self):
        try:
            MEMORY.free(self._nbytes)
        except AttributeError:
            pass

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
            self._nbytes += self.grad.nbytes
            MEMORY.alloc(self.grad.nbytes)
        else:
            self.grad += g

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor(kind={self.kind}, shape={self.shape})"


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False, kind="const")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _record(kind: str, out: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    # a finite sum implies finite entries; only re-check when the sum overflowed
    if not math.isfinite(np.add.reduce(out, axis=None)) and not np.isfinite(out).all():
        raise NumericError(f"{kind}: non-finite output")
    t = Tensor.__new__(Tensor)
    t.value = out
    t.grad = None
    t.kind = kind
    t.param = None
    t._done = False
    t._nbytes = out.nbytes
    MEMORY.alloc(t._nbytes)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = tuple(parents)
        t.backward_fn = fn
    else:
        t.requires_grad = False
        t.parents = ()
        t.backward_fn = None
    return t


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor, trans_b: bool = False) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bv = b.value.T if trans_b else b.value
    if a.shape[1] != bv.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, detail=f"trans_b={trans_b}")
    out = a.value @ bv

    def fn(g):
        ga = g @ bv.T if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        gb = a.value.T @ g
        return ga, gb.T if trans_b else gb

    return _record("matmul", out, (a, b), fn)


def _broadcast_grad(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and shape[1] == g.shape[1]:
        return g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and shape[0] == g.shape[0]:
        return g.sum(axis=1, keepdims=True)
    if shape == (1, 1):
        return g.sum(keepdims=True)
    raise ShapeError("broadcast", g.shape, shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    (ra, ca), (rb, cb) = a.shape, b.shape
    if (rb == ra or rb == 1) and (cb == ca or cb == 1):
        return
    raise ShapeError(op, a.shape, b.shape, detail="second operand may be a row, column or scalar")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1×C row, an N×1 column or 1×1."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.value + b.value
    sb = b.shape
    return _record("add", out, (a, b), lambda g: (g, _broadcast_grad(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sb = b.shape
    return _record("sub", a.value - b.value, (a, b), lambda g: (g, -_broadcast_grad(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a 1×C row, an N×1 column or 1×1."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value

    def fn(g):
        return g * bv, _broadcast_grad(g * av, bv.shape) if b.requires_grad else None

    return _record("mul", av * bv, (a, b), fn)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _record("scale", a.value * s, (a,), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    return _record("square", av * av, (a,), lambda g: (2.0 * av * g,))


def rowsoftmax(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record("rowsoftmax", p, (a,), fn)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    on = a.value > 0
    return _record("relu", np.where(on, a.value, 0.0), (a,), lambda g: (g * on,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    a = _as_tensor(a)
    x = a.value
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _record("gelu", out, (a,), fn)


def layernorm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Row-wise standardisation followed by an optional 1×C affine map."""
    x = _as_tensor(x)
    cols = x.shape[1]
    for p in (gain, bias):
        if p is not None and p.shape != (1, cols):
            raise ShapeError("layernorm", x.shape, p.shape)
    mu = x.value.mean(axis=1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value if gain is not None else 1.0
    out = xhat * gv
    if bias is not None:
        out = out + bias.value
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def fn(g):
        gx_hat = g * gv
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True)
        )
        grads = [gx]
        if gain is not None:
            grads.append((g * xhat).sum(axis=0, keepdims=True))
        if bias is not None:
            grads.append(g.sum(axis=0, keepdims=True))
        return tuple(grads)

    return _record("layernorm", out, parents, fn)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[i] = x[index[i]]``; negative indices produce zero rows."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or (index.size and index.max() >= x.shape[0]):
        raise ShapeError("gather_rows", x.shape, index.shape, detail="index out of range")
    valid = index >= 0
    out = np.zeros((index.size, x.shape[1]))
    out[valid] = x.value[index[valid]]
    rows = x.shape[0]

    def fn(g):
        gx = np.zeros((rows, g.shape[1]))
        np.add.at(gx, index[valid], g[valid])
        return (gx,)

    return _record("gather_rows", out, (x,), fn)


def scatter_add_rows(x: Tensor, index: np.ndarray, rows: int) -> Tensor:
    """``out[index[i]] += x[i]``; negative indices are dropped."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[0],) or (index.size and index.max() >= rows):
        raise ShapeError("scatter_add_rows", x.shape, index.shape, detail=f"rows={rows}")
    valid = index >= 0
    out = np.zeros((rows, x.shape[1]))
    np.add.at(out, index[valid], x.value[valid])

    def fn(g):
        gx = np.zeros(x.shape)
        gx[valid] = g[index[valid]]
        return (gx,)

    return _record("scatter_add_rows", out, (x,), fn)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols", *(p.shape for p in parts))
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.value for p in parts], axis=1)

    def fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _record("concat_cols", out, parts, fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError("slice_cols", x.shape, detail=f"[{start}:{stop}]")
    cols = x.shape[1]

    def fn(g):
        gx = np.zeros((g.shape[0], cols))
        gx[:, start:stop] = g
        return (gx,)

    return _record("slice_cols", x.value[:, start:stop].copy(), (x,), fn)


def reduce_mean_rows(x: Tensor, group: int, weights: np.ndarray | None = None) -> Tensor:
    """Mean over consecutive groups of ``group`` rows.

    With ``weights`` (one nonnegative value per row) the mean is weighted;
    a group whose weights sum to zero yields a zero row.
    """
    x = _as_tensor(x)
    rows, cols = x.shape
    if group < 1 or rows % group:
        raise ShapeError("reduce_mean_rows", x.shape, detail=f"group={group}")
    nb = rows // group
    w = np.ones(rows) if weights is None else np.asarray(weights, dtype=DTYPE).reshape(rows)
    wsum = w.reshape(nb, group).sum(axis=1)
    coef = (w.reshape(nb, group) / np.where(wsum > 0, wsum, 1.0)[:, None]).reshape(rows, 1)
    out = (x.value * coef).reshape(nb, group, cols).sum(axis=1)

    def fn(g):
        return (np.repeat(g, group, axis=0) * coef,)

    return _record("reduce_mean_rows", out, (x,), fn)


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``mask`` is true; masked entries get zero gradient."""
    x = _as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    keep = ~mask
    return _record("masked_fill", np.where(mask, value, x.value), (x,), lambda g: (g * keep,))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _record("sum", np.array([[x.value.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.value.size)


def index_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    index: np.ndarray | None,
    valid: np.ndarray,
    heads: int,
    bias: Tensor | None = None,
    chunk_elems: int = 1 << 21,
) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product attention over per-query key lists.

    Query ``i`` attends to key/value rows ``index[i, :]``; slots where
    ``valid`` is false are masked. With ``index=None`` every query sees every
    key row and ``valid`` is a per-key vector. ``bias``, if given, has one row
    per (query, slot) pair in row-major order and one column per head, added
    to the logits before masking. Returns the output tensor and the attention
    probabilities with shape ``(n, heads, L)``.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    n, hidden = q.shape
    nk = k.shape[0]
    valid = np.asarray(valid, dtype=bool)
    if k.shape != v.shape or k.shape[1] != hidden or heads < 1 or hidden % heads:
        raise ShapeError("index_attention", q.shape, k.shape, v.shape, detail=f"heads={heads}")
    shared = index is None
    if shared:
        if valid.shape != (nk,):
            raise ShapeError("index_attention", k.shape, valid.shape, detail="shared keys need a per-key mask")
        L = nk
    else:
        index = np.asarray(index, dtype=np.int64)
        if index.ndim != 2 or index.shape[0] != n or valid.shape != index.shape:
            raise ShapeError("index_attention", q.shape, index.shape, valid.shape)
        if index.size and (index.min() < 0 or index.max() >= nk):
            raise ShapeError("index_attention", k.shape, detail="index out of range")
        L = index.shape[1]
    if bias is not None and bias.shape != (n * L, heads):
        raise ShapeError("index_attention", bias.shape, (n * L, heads), detail="bias")
    d = hidden // heads
    sc = 1.0 / math.sqrt(d)
    step = max(1, chunk_elems // max(1, L * hidden))
    out = np.empty((n, hidden))
    probs = np.empty((n, heads, L))
    qv, kv, vv = q.value, k.value, v.value
    bv = None if bias is None else bias.value.reshape(n, L, heads)
    # keys: "lhd" when shared, "blhd" when gathered per query
    kspec = "lhd" if shared else "blhd"
    if shared:
        ks, vs = kv.reshape(nk, heads, d), vv.reshape(nk, heads, d)
        vmask = valid[None, None, :]

    def keys(s, e):
        if shared:
            return ks, vs, vmask
        idx = index[s:e]
        return kv[idx].reshape(e - s, L, heads, d), vv[idx].reshape(e - s, L, heads, d), valid[s:e, None, :]

    for s in range(0, n, step):
        e = min(n, s + step)
        kg, vg, ok = keys(s, e)
        logits = np.einsum(f"bhd,{kspec}->bhl", qv[s:e].reshape(e - s, heads, d), kg) * sc
        if bv is not None:
            logits += bv[s:e].transpose(0, 2, 1)
        logits = np.where(ok, logits, MASK_VALUE)
        logits -= logits.max(axis=2, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=2, keepdims=True)
        probs[s:e] = p
        out[s:e] = np.einsum(f"bhl,{kspec}->bhd", p, vg).reshape(e - s, hidden)

    parents = [q, k, v] + ([bias] if bias is not None else [])

    def fn(g):
        gq = np.empty_like(qv)
        gk = np.zeros((nk, heads, d))
        gv = np.zeros((nk, heads, d))
        gb = np.empty((n, L, heads)) if bias is not None else None
        for s in range(0, n, step):
            e = min(n, s + step)
            b = e - s
            kg, vg, _ = keys(s, e)
            p = probs[s:e]
            go = g[s:e].reshape(b, heads, d)
            qh = qv[s:e].reshape(b, heads, d)
            dp = np.einsum(f"bhd,{kspec}->bhl", go, vg)
            ds = p * (dp - (p * dp).sum(axis=2, keepdims=True))
            if gb is not None:
                gb[s:e] = ds.transpose(0, 2, 1)
            gq[s:e] = (np.einsum(f"bhl,{kspec}->bhd", ds, kg) * sc).reshape(b, hidden)
            if shared:
                gk += np.einsum("bhl,bhd->lhd", ds, qh) * sc
                gv += np.einsum("bhl,bhd->lhd", p, go)
            else:
                flat = index[s:e].reshape(-1)
                np.add.at(gk, flat, (np.einsum("bhl,bhd->blhd", ds, qh) * sc).reshape(b * L, heads, d))
                np.add.at(gv, flat, np.einsum("bhl,bhd->blhd", p, go).reshape(b * L, heads, d))
        grads = (gq, gk.reshape(nk, hidden), gv.reshape(nk, hidden))
        if gb is not None:
            grads += (gb.reshape(n * L, heads),)
        return grads

    return _record("index_attention", out, parents, fn), probs


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, accumulate: bool = False) -> None:
    """Propagate d(loss)/d(node) to every node and parameter leaf reachable from ``loss``."""
    if loss.shape != (1, 1):
        raise ShapeError("backward", loss.shape, detail="loss must be 1x1")
    if loss._done:
        raise GradientStateError("backward already ran on this loss")
    order = _topo_order(loss)
    stores = {id(n.param[0]): n.param[0] for n in order if n.param is not None}
    if not accumulate:
        for st in stores.values():
            if st.dirty:
                raise GradientStateError("parameter gradients not zeroed since last backward")
    loss._done = True
    if not loss.requires_grad:
        return
    loss._accumulate(np.ones((1, 1)))
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is not None and parent.requires_grad:
                parent._accumulate(g)
    for node in order:
        if node.param is not None and node.grad is not None:
            store, name = node.param
            store.grads[name] += node.grad
    for st in stores.values():
        st.dirty = True


# ---------------------------------------------------------------------------
# parameters

_MAGIC = b"ENSA"
_VERSION = 1


class ParamStore:
    """Named learnable 2-D arrays with gradient accumulators."""

    def __init__(self):
        self.values: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()
        self.dirty = False

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=DTYPE)
        if arr.ndim != 2:
            raise ShapeError("ParamStore.add", arr.shape, detail=name)
        if not np.isfinite(arr).all():
            raise NumericError(f"parameter {name!r}: non-finite entries")
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def set(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=DTYPE)
        if arr.shape != self.values[name].shape:
            raise ShapeError("ParamStore.set", self.values[name].shape, arr.shape, detail=name)
        if not np.isfinite(arr).all():
            raise NumericError(f"parameter {name!r}: non-finite entries")
        self.values[name][...] = arr

    def leaf(self, name: str) -> Tensor:
        # values are checked in add/set (load goes through add); skip the per-call scan
        arr = self.values[name]
        t = Tensor.__new__(Tensor)
        t.value = arr
        t.grad = None
        t.kind = "param"
        t.parents = ()
        t.backward_fn = None
        t.requires_grad = _grad_enabled
        t.param = (self, name)
        t._done = False
        t._nbytes = arr.nbytes
        MEMORY.alloc(t._nbytes)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.leaf(name)

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0
        self.dirty = False

    def num_scalars(self) -> int:
        return sum(v.size for v in self.values.values())

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, v in self.values.items():
            other.add(name, v)
        return other

    def save(self, path) -> None:
        chunks = [_MAGIC, struct.pack("<II", _VERSION, len(self.values))]
        for name, v in self.values.items():
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(raw)) + raw)
            chunks.append(struct.pack("<II", *v.shape))
            chunks.append(v.astype("<f8").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path) -> "ParamStore":
        buf = Path(path).read_bytes()
        if buf[:4] != _MAGIC:
            raise ValueError(f"{path}: bad magic {buf[:4]!r}")
        version, count = struct.unpack_from("<II", buf, 4)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        off = 12
        store = cls()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            rows, cols = struct.unpack_from("<II", buf, off)
            off += 8
            nbytes = rows * cols * 8
            if off + nbytes > len(buf):
                raise ValueError(f"{path}: truncated entry {name!r} at byte {off}")
            store.add(name, np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols))
            off += nbytes
        return store


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and all(e < self.tol for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status} worst={self.worst:.3e} tol={self.tol:.1e} params={len(self.max_rel_error)}"]
        lines += [f"  {f}" for f in self.failures]
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dividing by noise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[ParamStore], Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    tol: float = 1e-4,
    names: Sequence[str] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic parameter gradients of ``f`` against central differences.

    The relative-error floor is ``floor * max(1, |loss|)``: central differences
    carry roundoff of order |loss| * 1e-16 / eps, so an unscaled floor would
    fail exactly-zero gradients of large losses on noise alone.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    report = GradCheckReport(tol=tol)
    store.zero_grad()
    loss = f(store)
    backward(loss)
    base = float(loss.value[0, 0])
    with no_grad():
        again = float(f(store).value[0, 0])
    if again != base:
        report.failures.append(f"non-deterministic objective: {base!r} then {again!r}")
    for name in names or store.names():
        analytic = store.grads[name].copy()
        p = store.values[name]
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(f(store).value[0, 0])
                flat[i] = orig - eps
                down = float(f(store).value[0, 0])
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        err = relative_error(analytic, numeric, floor * max(1.0, abs(base)))
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
    store.zero_grad()
    return report
