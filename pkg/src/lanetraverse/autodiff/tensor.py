"""Tape-based reverse-mode differentiation over numpy arrays.

Every differentiable op evaluates eagerly with numpy and, when a tape is
active and at least one input requires a gradient, appends a record
``(output, inputs, vjp)`` to the tape. ``backward`` walks the tape in reverse
and accumulates vector-Jacobian products into ``Tensor.grad``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64
LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class ContractError(RuntimeError):
    """Raised when an API precondition is violated (e.g. non-scalar loss)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Ordered record of executed ops; inputs of every record precede it."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        self.records.append((out, inputs, vjp))


_local = threading.local()


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Make ``tape`` (or a fresh one) the active tape for this thread."""
    tape = Tape() if tape is None else tape
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


@contextmanager
def no_record() -> Iterator[None]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    tape = active_tape()
    out = Tensor(data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.record(out, inputs, vjp)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded input."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # leaves (parameters and user inputs) keep whatever was not consumed
    seen: set[int] = set()
    for _, inputs, _ in tape.records:
        for t in inputs:
            if isinstance(t, Tensor) and t.requires_grad and id(t) in grads and id(t) not in seen:
                seen.add(id(t))
                g = grads[id(t)]
                t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}") from None

    def vjp(g):
        if ad.ndim == 1:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = _unbroadcast(ad[:, None] * g[..., None, :], bd.shape)
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(out, (a, b), vjp)


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(np.where(m, g, 0.0), sa), _unbroadcast(np.where(m, 0.0, g), sb)

    return _emit(np.where(m, a.data, b.data), (a, b), vjp)


# shape ops ----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _emit(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _emit(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, ts, vjp)


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _emit(x.data[index], (x,), vjp)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis`` with an integer index array."""
    idx = np.asarray(indices, dtype=np.intp)
    src = x.shape
    axis = axis % x.ndim

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _emit(np.take(x.data, idx, axis=axis), (x,), vjp)


# nonlinearities -----------------------------------------------------------


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    d = x.data
    pos = d > 0
    return _emit(np.where(pos, d, slope * d), (x,), lambda g: (np.where(pos, g, slope * g),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(d: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * d))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,))


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; clipped entries get zero gradient."""
    d = x.data
    clipped = d < floor
    safe = np.where(clipped, floor, d)
    return _emit(np.log(safe), (x,), lambda g: (np.where(clipped, 0.0, g / safe),))


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
    d = x.data
    n = np.sqrt(np.sum(d * d, axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)

    def vjp(g):
        return (np.where(n > 0, np.expand_dims(g, axis) * d / safe, 0.0),)

    return _emit(np.squeeze(n, axis=axis), (x,), vjp)


def _masked_softmax(s: np.ndarray, mask: np.ndarray | None, axis: int) -> np.ndarray:
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    top = np.max(s, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(s - top)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    z = np.sum(e, axis=axis, keepdims=True)
    return e / np.where(z > 0, z, 1.0)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; masked-out entries get 0, fully masked rows are all 0."""
    m = None if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    y = _masked_softmax(x.data, m, axis)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _emit(y, (x,), vjp)


# reductions ---------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis, keepdims) * (1.0 / count)


def min_(x: Tensor, axis: int = -1) -> Tensor:
    """Minimum along ``axis``; ties route the gradient to the lowest index."""
    arg = np.argmin(x.data, axis=axis)
    src = x.shape
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _emit(out, (x,), vjp)


def squared_error(pred, target) -> Tensor:
    """Sum of squared differences."""
    diff = sub(pred, target)
    return sum_(mul(diff, diff))


# fused blocks -------------------------------------------------------------


def scaled_dot_product_attention(q, k, v, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    ``mask`` marks valid keys and may carry extra broadcast axes beyond the
    score shape (several key subsets attended by the same query). Query rows
    with no valid key produce zeros and pass no gradient to ``v``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    qd, kd, vd = q.data, k.data, v.data
    if qd.shape[-1] != kd.shape[-1] or kd.shape[-2] != vd.shape[-2]:
        raise ShapeError(f"attention: q {qd.shape}, k {kd.shape}, v {vd.shape}")
    scale = 1.0 / np.sqrt(qd.shape[-1])
    raw = (qd @ np.swapaxes(kd, -1, -2)) * scale
    m = None
    scores = raw
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        try:
            full = np.broadcast_shapes(raw.shape, m.shape)
        except ValueError:
            raise ShapeError(f"attention: mask {m.shape} does not broadcast with scores {raw.shape}") from None
        scores = np.broadcast_to(raw, full)
        m = np.broadcast_to(m, full)
    w = _masked_softmax(scores, m, -1)
    out = w @ vd

    def vjp(g):
        gv = _unbroadcast(np.swapaxes(w, -1, -2) @ g, vd.shape)
        gw = g @ np.swapaxes(vd, -1, -2)
        gs = _unbroadcast(w * (gw - np.sum(gw * w, axis=-1, keepdims=True)) * scale, raw.shape)
        gq = _unbroadcast(gs @ kd, qd.shape)
        gk = _unbroadcast(np.swapaxes(gs, -1, -2) @ qd, kd.shape)
        return gq, gk, gv

    return _emit(out, (q, k, v), vjp)


def subset_attention(q, k, v, subsets) -> Tensor:
    """One query per head attending over several key subsets at once.

    q (B, H, d), k (B, H, N, d), v (B, H, N, dv) and boolean ``subsets``
    (B, U, N) give (B, U, H, dv): for every subset u the softmax attention
    restricted to the keys it marks. Equal to ``scaled_dot_product_attention``
    with a (B, U, 1, N) mask, but the scores and exponentials are shared
    across subsets so the cost grows with U only through two matmuls.
    An empty subset yields zeros.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    qd, kd, vd = q.data, k.data, v.data
    M = np.asarray(subsets, dtype=np.float64)
    B, H, N, d = kd.shape
    dv = vd.shape[-1]
    if qd.shape != (B, H, d) or vd.shape[:3] != (B, H, N) or M.shape[0] != B or M.shape[2] != N:
        raise ShapeError(f"subset attention: q {qd.shape}, k {kd.shape}, v {vd.shape}, subsets {M.shape}")
    scale = 1.0 / np.sqrt(d)
    s = np.einsum("bhd,bhnd->bhn", qd, kd) * scale
    used = M.any(axis=1)[:, None, :]  # (B, 1, N)
    shift = np.where(used, s, -np.inf).max(axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = np.where(used, np.exp(np.minimum(s - shift, 0.0)), 0.0)  # (B, H, N)
    U = M.shape[1]
    Z = M @ np.swapaxes(e, 1, 2)  # (B, U, H)
    zinv = np.where(Z > 0, 1.0 / np.where(Z > 0, Z, 1.0), 0.0)
    ev = e[..., None] * vd  # (B, H, N, dv)
    num = (M @ np.swapaxes(ev, 1, 2).reshape(B, N, H * dv)).reshape(B, U, H, dv)
    out = num * zinv[..., None]

    def vjp(g):
        gnum = g * zinv[..., None]
        gz = -(g * out).sum(-1) * zinv  # (B, U, H)
        mt = np.swapaxes(M, 1, 2)
        gev = np.swapaxes((mt @ gnum.reshape(B, U, H * dv)).reshape(B, N, H, dv), 1, 2)
        ge = (gev * vd).sum(-1) + np.swapaxes(mt @ gz, 1, 2)
        gv = gev * e[..., None]
        gs = ge * e * scale
        gq = np.einsum("bhn,bhnd->bhd", gs, kd)
        gk = gs[..., None] * qd[:, :, None, :]
        return gq, gk, gv

    return _emit(out, (q, k, v), vjp)


def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """One GRU step with gate order (reset, update, candidate).

    ``w_ih`` is ``(in, 3H)`` and ``w_hh`` is ``(H, 3H)``:

        r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
        z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
        n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h
    """
    x, h = as_tensor(x), as_tensor(h)
    xd, hd = x.data, h.data
    H = hd.shape[-1]
    if w_ih.shape[-1] != 3 * H or w_hh.shape != (H, 3 * H) or xd.shape[-1] != w_ih.shape[0]:
        raise ShapeError(f"gru_cell: x {xd.shape}, h {hd.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}")
    gi = xd @ w_ih.data + b_ih.data
    gh = hd @ w_hh.data + b_hh.data
    r = _sigmoid(gi[..., :H] + gh[..., :H])
    z = _sigmoid(gi[..., H:2 * H] + gh[..., H:2 * H])
    hn = gh[..., 2 * H:]
    n = np.tanh(gi[..., 2 * H:] + r * hn)
    out = (1.0 - z) * n + z * hd

    def vjp(g):
        an = g * (1.0 - z) * (1.0 - n * n)
        ar = an * hn * r * (1.0 - r)
        az = g * (hd - n) * z * (1.0 - z)
        d_gi = np.concatenate([ar, az, an], axis=-1)
        d_gh = np.concatenate([ar, az, an * r], axis=-1)
        gx = d_gi @ w_ih.data.T
        gh_ = g * z + d_gh @ w_hh.data.T
        x2 = xd.reshape(-1, xd.shape[-1])
        h2 = hd.reshape(-1, H)
        dgi2 = d_gi.reshape(-1, 3 * H)
        dgh2 = d_gh.reshape(-1, 3 * H)
        return (gx, gh_, x2.T @ dgi2, h2.T @ dgh2, dgi2.sum(axis=0), dgh2.sum(axis=0))

    return _emit(out, (x, h, w_ih, w_hh, b_ih, b_hh), vjp)
