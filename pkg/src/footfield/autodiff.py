"""Reverse-mode automatic differentiation over dense float64 tensors.

A ``Tape`` records primitive operations while it is active (used as a context
manager); ``Tape.backward`` replays the pullbacks in reverse recording order
and returns a gradient map keyed by tensor id. Outside an active tape all
operations run eagerly on numpy data with no recording, which is the fast
path for inference and evaluation.

Broadcasting is restricted to leading-dimension expansion: two shapes are
compatible when they are equal, or when one (after stripping leading 1s) is
a trailing suffix of the other. Anything else requires an explicit reshape.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for a primitive."""


class TapeError(RuntimeError):
    """Tape used against its lifecycle contract."""


class GradientMissingError(KeyError):
    """Optimizer asked to update a parameter that received no gradient."""


_ids = itertools.count()


class Tensor:
    """A numpy array plus autodiff bookkeeping. Data is always float64."""

    __slots__ = ("data", "requires_grad", "tid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tid = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tensor_slice(self, key)


def parameter(data) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


class Tape:
    """Ordered record of primitive operations; single-threaded.

    ``backward`` may run once per recording; afterwards the tape must be
    ``reset`` before recording or differentiating again.
    """

    _active: list["Tape"] = []

    def __init__(self):
        self._records: list[tuple[int, tuple[tuple[int, Callable], ...]]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active.pop()
        return False

    @staticmethod
    def current() -> "Tape | None":
        return Tape._active[-1] if Tape._active else None

    def record(self, out_tid: int, parents: tuple) -> None:
        if self._spent:
            raise TapeError("tape already differentiated; call reset() before reuse")
        self._records.append((out_tid, parents))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate gradients of a scalar loss for every recorded tensor."""
        if self._spent:
            raise TapeError("backward already called on this tape; reset() first")
        if not isinstance(loss, Tensor) or loss.shape != ():
            raise TapeError(f"loss must be a scalar Tensor, got shape "
                            f"{getattr(loss, 'shape', None)}")
        self._spent = True
        grads: dict[int, np.ndarray] = {loss.tid: np.ones(())}
        for out_tid, parents in reversed(self._records):
            g = grads.get(out_tid)
            if g is None:
                continue
            for parent_tid, pull in parents:
                contrib = pull(g)
                prev = grads.get(parent_tid)
                grads[parent_tid] = contrib if prev is None else prev + contrib
        return grads

    def reset(self) -> None:
        self._records.clear()
        self._spent = False


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: Iterable[tuple[Tensor, Callable]]) -> Tensor:
    tape = Tape.current()
    if tape is None:
        return out
    tracked = tuple((p.tid, pull) for p, pull in parents if p.requires_grad)
    if tracked:
        out.requires_grad = True
        tape.record(out.tid, tracked)
    return out


# ---------------------------------------------------------------------------
# broadcasting (leading-dimension expansion only)
# ---------------------------------------------------------------------------

def _strip_leading_ones(shape: tuple) -> tuple:
    i = 0
    while i < len(shape) and shape[i] == 1:
        i += 1
    return shape[i:]


def _check_broadcast(sa: tuple, sb: tuple, opname: str) -> tuple:
    if sa == sb:
        return sa
    ca, cb = _strip_leading_ones(sa), _strip_leading_ones(sb)
    if len(ca) <= len(cb) and (len(ca) == 0 or cb[len(cb) - len(ca):] == ca):
        return sb if len(sb) >= len(sa) else sa[:len(sa) - len(ca)] + cb
    if len(cb) <= len(ca) and (len(cb) == 0 or ca[len(ca) - len(cb):] == cb):
        return sa if len(sa) >= len(sb) else sb[:len(sb) - len(cb)] + ca
    raise ShapeError(f"{opname}: shapes {sa} and {sb} are not compatible "
                     f"(only leading-dimension broadcasting is supported)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape, "add")
    out = Tensor(a.data + b.data)
    return _record(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                         (b, lambda g: _unbroadcast(g, b.shape))])


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                         (b, lambda g: _unbroadcast(-g, b.shape))])


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape, "mul")
    out = Tensor(a.data * b.data)
    return _record(out, [(a, lambda g: _unbroadcast(g * b.data, a.shape)),
                         (b, lambda g: _unbroadcast(g * a.data, b.shape))])


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape, "div")
    out = Tensor(a.data / b.data)
    return _record(out, [
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    ])


def neg(a) -> Tensor:
    a = _lift(a)
    out = Tensor(-a.data)
    return _record(out, [(a, lambda g: -g)])


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape} "
                         f"(strictly 2-D, inner dimensions must agree)")
    out = Tensor(a.data @ b.data)
    return _record(out, [(a, lambda g: g @ b.data.T),
                         (b, lambda g: a.data.T @ g)])


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.asarray(g), shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape
    return _record(out, [(a, lambda g: _expand_reduced(np.asarray(g), shape, axis, keepdims))])


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    shape = a.shape
    n = a.size if axis is None else np.prod(
        [shape[ax % len(shape)] for ax in ((axis,) if isinstance(axis, int) else axis)])
    return _record(out, [(a, lambda g: _expand_reduced(np.asarray(g) / n, shape, axis, keepdims))])


def min_reduce(a, axis: int) -> Tensor:
    """Minimum over one axis; subgradient routed to the first minimizer."""
    a = _lift(a)
    out_data = a.data.min(axis=axis)
    argmin = a.data.argmin(axis=axis)

    def pull(g):
        z = np.zeros_like(a.data)
        np.put_along_axis(z, np.expand_dims(argmin, axis),
                          np.expand_dims(g, axis), axis)
        return z

    return _record(Tensor(out_data), [(a, pull)])


def norm2(a, axis=None) -> Tensor:
    """Euclidean norm along ``axis`` (all elements when None); subgradient 0 at 0."""
    a = _lift(a)
    sq = (a.data * a.data).sum(axis=axis)
    n = np.sqrt(sq)
    out = Tensor(n)

    def pull(g):
        safe = np.where(n == 0.0, 1.0, n)
        scale = np.asarray(g) / safe
        if axis is not None:
            scale = np.expand_dims(scale, axis)
            zero = np.expand_dims(n == 0.0, axis)
        else:
            zero = n == 0.0
        return np.where(zero, 0.0, scale * a.data)

    return _record(out, [(a, pull)])


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def tanh(a) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.data)
    return _record(Tensor(y), [(a, lambda g: g * (1.0 - y * y))])


def sin(a) -> Tensor:
    a = _lift(a)
    return _record(Tensor(np.sin(a.data)), [(a, lambda g: g * np.cos(a.data))])


def cos(a) -> Tensor:
    a = _lift(a)
    return _record(Tensor(np.cos(a.data)), [(a, lambda g: -g * np.sin(a.data))])


def exp(a) -> Tensor:
    a = _lift(a)
    y = np.exp(a.data)
    return _record(Tensor(y), [(a, lambda g: g * y)])


def log(a) -> Tensor:
    a = _lift(a)
    return _record(Tensor(np.log(a.data)), [(a, lambda g: g / a.data)])


def sqrt(a) -> Tensor:
    a = _lift(a)
    y = np.sqrt(a.data)
    return _record(Tensor(y), [(a, lambda g: g / (2.0 * y))])


def relu(a) -> Tensor:
    """max(x, 0) with subgradient 0 at x = 0."""
    a = _lift(a)
    mask = a.data > 0.0
    return _record(Tensor(np.where(mask, a.data, 0.0)), [(a, lambda g: g * mask)])


def sigmoid(a) -> Tensor:
    a = _lift(a)
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _record(Tensor(y), [(a, lambda g: g * y * (1.0 - y))])


def softplus(a) -> Tensor:
    """ln(1 + e^x), overflow-safe for large |x|."""
    a = _lift(a)
    y = np.logaddexp(0.0, a.data)
    s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _record(Tensor(y), [(a, lambda g: g * s)])


def log_softmax(a, axis: int = -1) -> Tensor:
    """Log-softmax stabilized through log-sum-exp."""
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def pull(g):
        return g - np.exp(y) * g.sum(axis=axis, keepdims=True)

    return _record(Tensor(y), [(a, pull)])


# ---------------------------------------------------------------------------
# shape / indexing primitives
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    orig = a.shape
    return _record(Tensor(a.data.reshape(shape)), [(a, lambda g: g.reshape(orig))])


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    _check_broadcast(a.shape, tuple(shape), "broadcast_to")
    orig = a.shape
    return _record(Tensor(np.broadcast_to(a.data, shape).copy()),
                   [(a, lambda g: _unbroadcast(g, orig))])


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_pull(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _record(out, [(p, make_pull(i)) for i, p in enumerate(parts)])


def tensor_slice(a, key) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data[key])

    def pull(g):
        z = np.zeros_like(a.data)
        z[key] = g
        return z

    return _record(out, [(a, pull)])


def take_rows(a, idx) -> Tensor:
    """Fancy-index the leading axis with an integer array; scatter-adds on backward."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def pull(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return z

    return _record(out, [(a, pull)])


def index_add(n: int, idx, values) -> Tensor:
    """Scatter-add rows of ``values`` into a zero tensor with leading size ``n``
    (the adjoint of take_rows)."""
    values = _lift(values)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, idx, values.data)
    return _record(Tensor(out), [(values, lambda g: g[idx])])


def gather_cols(a, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D tensor."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"gather_cols expects a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, idx])

    def pull(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (rows, idx), g)
        return z

    return _record(out, [(a, pull)])


def scale_rows(a, s) -> Tensor:
    """Multiply each row of a 2-D tensor by a per-row scalar: out[i] = a[i] * s[i]."""
    a, s = _lift(a), _lift(s)
    if a.ndim != 2 or s.shape != (a.shape[0],):
        raise ShapeError(f"scale_rows expects (N, C) and (N,), got {a.shape} and {s.shape}")
    out = Tensor(a.data * s.data[:, None])
    return _record(out, [(a, lambda g: g * s.data[:, None]),
                         (s, lambda g: (g * a.data).sum(axis=1))])


def clamp01(a) -> Tensor:
    """Clamp to [0, 1] built from relu pieces (flat outside, slope 1 inside)."""
    return sub(relu(a), relu(sub(a, 1.0)))


# ---------------------------------------------------------------------------
# rotation
# ---------------------------------------------------------------------------

def euler_rotation(r) -> Tensor:
    """3x3 rotation from intrinsic XYZ Euler angles (radians): R = Rx @ Ry @ Rz."""
    r = _lift(r)
    if r.shape != (3,):
        raise ShapeError(f"euler_rotation expects shape (3,), got {r.shape}")
    x, y, z = r.data
    cx, sx = np.cos(x), np.sin(x)
    cy, sy = np.cos(y), np.sin(y)
    cz, sz = np.cos(z), np.sin(z)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    out = Tensor(rx @ ry @ rz)

    drx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dry = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    drz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    partials = np.stack([drx @ ry @ rz, rx @ dry @ rz, rx @ ry @ drz])

    def pull(g):
        return np.array([(partials[i] * g).sum() for i in range(3)])

    return _record(out, [(r, pull)])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; state is kept per parameter tensor id."""

    def __init__(self, params: Sequence[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.t = 0
        self.m = {p.tid: np.zeros_like(p.data) for p in self.params}
        self.v = {p.tid: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: dict[int, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            if p.tid not in grads:
                raise GradientMissingError(
                    f"no gradient recorded for parameter tid={p.tid} shape={p.shape}")
            g = grads[p.tid]
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m = self.m[p.tid] = b1 * self.m[p.tid] + (1.0 - b1) * g
            v = self.v[p.tid] = b2 * self.v[p.tid] + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
