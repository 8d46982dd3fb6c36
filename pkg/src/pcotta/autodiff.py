"""Tape-based reverse-mode differentiation over numpy arrays.

Every learnable computation in the package runs on this module.  A
:class:`Tape` records each differentiable operation executed while it is
active; :meth:`Tape.backward` replays the record in reverse and deposits
gradients on the :class:`Parameter` leaves that were reached.

Outside an active tape, operations run eagerly and record nothing, which is
what inference paths use.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError, TapeError

DTYPE = np.float32

_ACTIVE: list["Tape"] = []


class Tensor:
    """Immutable n-d array plus its position on the active tape."""

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """A trainable leaf: value, accumulated gradient and a trainable flag.

    ``data`` is replaced (never mutated in place) by optimizer updates, so
    arrays handed out by earlier forward passes stay valid.
    """

    __slots__ = ("grad", "name")

    def __init__(self, value, name: str = "", trainable: bool = True):
        value = np.array(value, dtype=DTYPE)
        super().__init__(value, requires_grad=trainable)
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {value.shape} to parameter {self.name!r} of shape {self.data.shape}")
        self.data = value.copy()

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded when at least one input requires a gradient.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple, Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by backward(); start a new tape")
        self._records.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(parameter) into every reachable trainable parameter."""
        if self._consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        if not loss.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if isinstance(inp, Parameter):
                    inp.grad = inp.grad + gi.astype(inp.grad.dtype, copy=False)
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self._records.clear()


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


class no_grad:
    """Suspend recording for the enclosed block."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)


def make_op(data: np.ndarray, inputs: Sequence, vjp: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record ``vjp`` if any input needs grad.

    ``vjp(g)`` must return one gradient (or ``None``) per entry of ``inputs``.
    Other modules use this to register fused kernels.
    """
    needs = any(isinstance(x, Tensor) and x.requires_grad for x in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is None:
            out.requires_grad = False
        else:
            tape.record(out, tuple(inputs), vjp)
    return out


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE) if not isinstance(x, np.ndarray) else x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape_of(x) -> tuple[int, ...]:
    return np.shape(_raw(x))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    sa, sb = _shape_of(a), _shape_of(b)
    return make_op(_raw(a) + _raw(b), (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    sa, sb = _shape_of(a), _shape_of(b)
    return make_op(_raw(a) - _raw(b), (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    ra, rb = _raw(a), _raw(b)
    sa, sb = np.shape(ra), np.shape(rb)
    return make_op(ra * rb, (a, b), lambda g: (_unbroadcast(g * rb, sa), _unbroadcast(g * ra, sb)))


def div(a, b) -> Tensor:
    ra, rb = _raw(a), _raw(b)
    sa, sb = np.shape(ra), np.shape(rb)
    out = ra / rb
    return make_op(out, (a, b), lambda g: (_unbroadcast(g / rb, sa), _unbroadcast(-g * out / rb, sb)))


def astype(a, dtype) -> Tensor:
    """Cast to ``dtype``; the gradient is cast back to the input's dtype."""
    ra = _raw(a)
    return make_op(ra.astype(dtype), (a,), lambda g: (g.astype(ra.dtype),))


def neg(a) -> Tensor:
    return make_op(-_raw(a), (a,), lambda g: (-g,))


def square(a) -> Tensor:
    ra = _raw(a)
    return make_op(ra * ra, (a,), lambda g: (2 * g * ra,))


def sqrt(a) -> Tensor:
    out = np.sqrt(_raw(a))
    return make_op(out, (a,), lambda g: (g / (2 * out),))


def exp(a) -> Tensor:
    out = np.exp(_raw(a))
    return make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    ra = _raw(a)
    return make_op(np.log(ra), (a,), lambda g: (g / ra,))


def relu(a) -> Tensor:
    ra = _raw(a)
    mask = ra > 0
    # np.maximum keeps NaN visible to downstream finiteness checks
    return make_op(np.maximum(ra, 0).astype(ra.dtype, copy=False), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    ra = _raw(a)
    out = np.empty_like(ra)
    pos = ra >= 0
    out[pos] = 1 / (1 + np.exp(-ra[pos]))
    ez = np.exp(ra[~pos])
    out[~pos] = ez / (1 + ez)
    return make_op(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a) -> Tensor:
    out = np.tanh(_raw(a))
    return make_op(out, (a,), lambda g: (g * (1 - out * out),))


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b`` (mask is a constant)."""
    mask = np.asarray(mask, dtype=bool)
    sa, sb = _shape_of(a), _shape_of(b)
    out = np.where(mask, _raw(a), _raw(b))
    return make_op(
        out, (a, b), lambda g: (_unbroadcast(np.where(mask, g, 0), sa), _unbroadcast(np.where(mask, 0, g), sb))
    )


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    ra = _raw(a)
    shape = ra.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.sum(ra, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    ra = _raw(a)
    if axis is None:
        n = ra.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(ra.shape[ax] for ax in axes)
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(a, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    ra = _raw(a)
    idx = np.expand_dims(np.argmax(ra, axis=axis), axis)
    out = np.take_along_axis(ra, idx, axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(ra)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make_op(out, (a,), vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    ra, rb = _raw(a), _raw(b)
    if ra.ndim < 2 or rb.ndim < 2 or ra.shape[-1] != rb.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {ra.shape} x {rb.shape}")
    sa, sb = ra.shape, rb.shape

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(rb, -1, -2))
        gb = np.matmul(np.swapaxes(ra, -1, -2), g)
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return make_op(np.matmul(ra, rb), (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    ra = _raw(a)
    old = ra.shape
    return make_op(ra.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    ra = _raw(a)
    if axes is None:
        axes = tuple(reversed(range(ra.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(ra, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    ra = _raw(a)
    old = ra.shape
    return make_op(np.broadcast_to(ra, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def expand_dims(a, axis: int) -> Tensor:
    ra = _raw(a)
    return reshape(a, np.expand_dims(ra, axis).shape)


def concat(items: Sequence, axis: int = 0) -> Tensor:
    raws = [_raw(x) for x in items]
    sizes = [r.shape[axis] for r in raws]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return make_op(np.concatenate(raws, axis=axis), tuple(items), vjp)


def stack(items: Sequence, axis: int = 0) -> Tensor:
    return concat([expand_dims(x, axis) for x in items], axis=axis)


def take(a, index) -> Tensor:
    """Basic or advanced indexing, ``a[index]``; repeated indices accumulate."""
    ra = _raw(a)

    def vjp(g):
        full = np.zeros_like(ra)
        np.add.at(full, index, g)
        return (full,)

    return make_op(ra[index], (a,), vjp)


# ---------------------------------------------------------------- normalizations


def normalize_last(a, floor: float = 0.0) -> Tensor:
    """Scale each last-axis vector to unit Euclidean norm; zero vectors stay zero."""
    ra = _raw(a)
    norm = np.sqrt(np.sum(ra * ra, axis=-1, keepdims=True))
    safe = np.where(norm > floor, norm, 1)
    out = np.where(norm > floor, ra / safe, 0).astype(ra.dtype, copy=False)

    def vjp(g):
        proj = np.sum(g * out, axis=-1, keepdims=True)
        return (np.where(norm > floor, (g - out * proj) / safe, 0).astype(g.dtype, copy=False),)

    return make_op(out, (a,), vjp)


def softmax_last(a) -> Tensor:
    ra = _raw(a)
    z = np.exp(ra - np.max(ra, axis=-1, keepdims=True))
    out = z / np.sum(z, axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return make_op(out, (a,), vjp)


def log_softmax_last(a) -> Tensor:
    ra = _raw(a)
    shifted = ra - np.max(ra, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * np.sum(g, axis=-1, keepdims=True),)

    return make_op(out, (a,), vjp)


# ---------------------------------------------------------------- gradient checking


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Parameter], eps: float = 1e-6) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` must rebuild its computation from the current parameter values on
    every call.  Parameters are upcast to float64 for the duration of the
    check and restored afterwards.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    params = list(params)
    saved = [(p.data, p.grad, p.requires_grad) for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = np.zeros_like(p.data)
            p.requires_grad = True
        with Tape() as tape:
            loss = f()
            tape.backward(loss)
        worst = 0.0
        for p in params:
            analytic = p.grad.copy()
            base = p.data
            for idx in np.ndindex(base.shape):
                orig = base[idx]
                bumped = base.copy()
                bumped[idx] = orig + eps
                p.data = bumped
                with no_grad():
                    hi = float(np.sum(f().data))
                bumped = base.copy()
                bumped[idx] = orig - eps
                p.data = bumped
                with no_grad():
                    lo = float(np.sum(f().data))
                p.data = base
                numeric = (hi - lo) / (2 * eps)
                a = float(analytic[idx])
                denom = max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, abs(a - numeric) / denom)
        return worst
    finally:
        for p, (data, grad, req) in zip(params, saved):
            p.data, p.grad, p.requires_grad = data, grad, req


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay and an optional cosine schedule.

    With ``horizon=None`` the learning rate stays at ``lr``; otherwise step
    ``t`` (0-based) uses ``lr * 0.5 * (1 + cos(pi * t / horizon))`` and zero
    once ``t >= horizon``.
    """

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        horizon: int | None = None,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.betas = betas
        self.eps = eps
        self.weight_decay = float(weight_decay)
        self.horizon = horizon
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def lr_at(self, t: int) -> float:
        if self.horizon is None:
            return self.lr
        if t >= self.horizon:
            return 0.0
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * t / self.horizon))

    def step(self) -> None:
        lr = self.lr_at(self.t)
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for i, p in enumerate(self.params):
            if not p.trainable:
                p.zero_grad()
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            if lr != 0.0:
                value = p.data
                if self.weight_decay:
                    value = value - lr * self.weight_decay * value
                m_hat = self.m[i] / c1
                v_hat = self.v[i] / c2
                p.data = (value - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype, copy=False)
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.t], dtype=np.float32)}
        for i, p in enumerate(self.params):
            out[f"m.{p.name or i}"] = self.m[i]
            out[f"v.{p.name or i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["step"][0])
        for i, p in enumerate(self.params):
            key = p.name or i
            self.m[i] = np.asarray(arrays[f"m.{key}"], dtype=p.data.dtype).reshape(p.shape)
            self.v[i] = np.asarray(arrays[f"v.{key}"], dtype=p.data.dtype).reshape(p.shape)
