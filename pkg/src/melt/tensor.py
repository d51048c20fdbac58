"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops only record onto a tape while one is active::

    with Tape() as tape:
        loss = mean(mul(x, x))
    backward(loss, tape)

Outside a tape block every op is a plain numpy computation, which is what
inference uses. Leaf gradients accumulate across ``backward`` calls until
``zero_grad`` resets them.

Broadcasting follows numpy's trailing-dimension rule: shapes are aligned
from the right, and each aligned pair of extents must be equal or one of
them must be 1 (missing leading extents count as 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _accel


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def _not_scalar(t):
    raise DimensionError(f"expected a one-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    backward: Callable


@dataclass
class Tape:
    """Ordered record of executed ops; backward replays it in reverse."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)
        return False


def _result(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.is_leaf = True
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.is_leaf = False
        tape.nodes.append(_Node(out, tuple(parents), backward))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every leaf on the tape."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if not any(n.out is loss for n in tape.nodes):
        raise ValueError("loss was not produced on this tape")
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pgrads = node.backward(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p.is_leaf:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# helpers


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{opname}: incompatible shapes {a} and {b}") from None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def sigmoid_np(u):
    # split by sign so exp never overflows
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = sigmoid_np(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    return _result(_accel.gelu_fwd(x), (a,), lambda g: (_accel.gelu_bwd(x, g),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def elementwise(op: str, *args, **kw) -> Tensor:
    """Name-dispatched elementwise op: add, sub, mul, sigmoid, scale."""
    table = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "scale": scale}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kw)


def detach(a: Tensor) -> Tensor:
    """Stop-gradient: same values, no connection to the tape."""
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# linear algebra / reductions / shape


def matmul(a, b) -> Tensor:
    """(…, m, k) @ (k, n) or batched (B…, m, k) @ (B…, k, n) with equal batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), bw)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def index(a, idx) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters back into a zero buffer."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        buf = np.zeros(shape)
        buf[idx] = g
        return (buf,)

    return _result(np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len(ts) == 1:
        return ts[0]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in ts], axis=axis)

    def bw(g):
        parts = []
        for i in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(parts)

    return _result(out, ts, bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range for vocab_size={vocab}")

    def bw(g):
        buf = np.zeros(table.shape)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (buf,)

    return _result(table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# normalisation / attention pieces


def softmax_rows(x, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean (Q, K) array broadcast over leading dims; False
    entries get probability exactly 0. A row with no allowed entry is an
    error.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_rows needs a last dimension >= 1, got {x.shape}")
    shape = x.shape
    K = shape[-1]
    Q = shape[-2] if x.ndim >= 2 else 1
    if mask is None:
        allowed = np.ones((Q, K), dtype=np.bool_)
    else:
        allowed = np.asarray(mask, dtype=np.bool_)
        if allowed.shape != (Q, K):
            raise DimensionError(f"mask shape {allowed.shape} does not match rows {(Q, K)}")
        if not allowed.any(axis=-1).all():
            raise ValueError("softmax_rows: a row is fully masked")
    x3 = x.data.reshape(-1, Q, K)
    y = _accel.softmax_fwd(x3, allowed).reshape(shape)

    def bw(g):
        return (_accel.softmax_bwd(y.reshape(-1, Q, K), g.reshape(-1, Q, K)).reshape(shape),)

    return _result(y, (x,), bw)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def gather_last(x, idx) -> Tensor:
    """out[...] = x[..., idx[...]]"""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        buf = np.zeros(shape)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        return (buf,)

    return _result(out, (x,), bw)


def rms_norm(x, weight, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x**2) + eps) * weight over the last axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    if eps <= 0:
        raise ValueError("rms_norm eps must be positive")
    d = x.shape[-1]
    if weight.shape != (d,):
        raise DimensionError(f"rms_norm weight {weight.shape} does not match last dim {d}")
    shape = x.shape
    x2 = x.data.reshape(-1, d)
    y, inv = _accel.rms_norm_fwd(x2, weight.data, eps)

    def bw(g):
        gx, gw = _accel.rms_norm_bwd(x2, weight.data, inv, g.reshape(-1, d))
        return gx.reshape(shape), gw

    return _result(y.reshape(shape), (x, weight), bw)


def rope_tables(positions, head_dim: int, base: float = 10000.0):
    half = head_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang), np.sin(ang)


def rope(x, positions, base: float = 10000.0) -> Tensor:
    """Rotary embedding on (…, L, head_dim), half-split pairing."""
    x = as_tensor(x)
    shape = x.shape
    L, dh = shape[-2], shape[-1]
    if dh % 2:
        raise DimensionError(f"rope needs an even head dim, got {dh}")
    if len(positions) != L:
        raise DimensionError(f"rope: {len(positions)} positions for {L} rows")
    cos, sin = rope_tables(positions, dh, base)
    y = _accel.rope(x.data.reshape(-1, L, dh), cos, sin, 1.0).reshape(shape)
    return _result(
        y, (x,), lambda g: (_accel.rope(g.reshape(-1, L, dh), cos, sin, -1.0).reshape(shape),)
    )


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)
