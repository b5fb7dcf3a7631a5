"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Every differentiable primitive appends one record to the active ``Tape`` when
at least one of its inputs requires a gradient. ``backward`` walks the records
in reverse order exactly once, so the tape order is already a valid
topological order and no graph sort is needed.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the real work lives in the module-level primitives
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the output gradient to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


_TAPES: list[Tape] = [Tape()]
_GRAD_ENABLED = [True]


def current_tape() -> Tape:
    return _TAPES[-1]


@contextlib.contextmanager
def recording(tape: Tape | None = None):
    """Route primitives to a fresh (or given) tape for the duration of the block."""
    tape = Tape() if tape is None else tape
    _TAPES.append(tape)
    try:
        yield tape
    finally:
        _TAPES.pop()


@contextlib.contextmanager
def no_grad():
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: tuple[Tensor, ...], out_values: np.ndarray, backward) -> Tensor:
    needs = _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=needs)
    if needs:
        out._leaf = False
        _TAPES[-1].records.append(Record(op, inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.values + b.values,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.values - b.values,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values

    def back(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), av * bv, back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values

    def back(g):
        ga = _unbroadcast(g / bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * av / (bv * bv), bv.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", (a, b), av / bv, back)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _emit("scale", (x,), x.values * c, lambda g: (g * c,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    return _emit("log", (x,), np.log(xv), lambda g: (g / xv,))


def sqrt(x) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    x = as_tensor(x)
    out = np.sqrt(x.values)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _emit("sqrt", (x,), out, back)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.values)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


_sigmoid = expit


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.values)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    s = _sigmoid(xv)
    return _emit("silu", (x,), xv * s, lambda g: (g * (s + xv * s * (1.0 - s)),))


def clamp01(x) -> Tensor:
    """min(1, max(0, x)); gradient 1 strictly inside (0, 1), 0 elsewhere."""
    x = as_tensor(x)
    xv = x.values
    inside = (xv > 0.0) & (xv < 1.0)
    return _emit("clamp01", (x,), np.clip(xv, 0.0, 1.0), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions / shape


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), x.values.sum(axis=axis, keepdims=keepdims), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.values.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _emit("reshape", (x,), x.values.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), x.values.transpose(axes), lambda g: (g.transpose(inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _emit("getitem", (x,), x.values[index], back)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(t) for t in xs)
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", xs, np.concatenate([t.values for t in xs], axis=axis),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(t) for t in xs)
    n = len(xs)
    return _emit("stack", xs, np.stack([t.values for t in xs], axis=axis),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _emit("matmul", (a, b), av @ bv, back)


def linear(x, w) -> Tensor:
    """x @ w.T for a weight stored as [out, in]; x may carry any leading axes."""
    x, w = as_tensor(x), as_tensor(w)
    xv, wv = x.values, w.values
    if xv.shape[-1] != wv.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {xv.shape} vs weight {wv.shape}")

    def back(g):
        gx = g @ wv if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
        return gx, gw

    return _emit("linear", (x, w), xv @ wv.T, back)


# ---------------------------------------------------------------- nn primitives


def softmax(x, where: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``where`` (bool, broadcastable) excludes entries."""
    x = as_tensor(x)
    xv = x.values
    if xv.shape[-1] == 0:
        raise DegenerateInputError("softmax over an empty axis")
    if where is not None:
        xv = np.where(where, xv, -np.inf)
    m = xv.max(axis=-1, keepdims=True)
    e = np.exp(xv - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), out, back)


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    """x / rms(x) * gain over the last axis; gain broadcasts against x."""
    x, gain = as_tensor(x), as_tensor(gain)
    xv, gv = x.values, gain.values
    inv = 1.0 / np.sqrt((xv * xv).mean(axis=-1, keepdims=True) + eps)
    xhat = xv * inv

    def back(g):
        gx = ggain = None
        if gain.requires_grad:
            ggain = _unbroadcast(g * xhat, gv.shape)
        if x.requires_grad:
            gh = g * gv
            d = xv.shape[-1]
            gx = inv * (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, ggain

    return _emit("rmsnorm", (x, gain), xhat * gv, back)


def embedding_gather(table, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _emit("embedding_gather", (table,), table.values[ids], back)


def cross_entropy_logits(logits, target_ids: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean token NLL over positions where ``loss_mask`` is set."""
    logits = as_tensor(logits)
    lv = logits.values
    target_ids = np.asarray(target_ids, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=np.float64)
    count = mask.sum()
    if count <= 0:
        raise DegenerateInputError("cross entropy with an empty loss mask")
    m = lv.max(axis=-1, keepdims=True)
    shifted = lv - m
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, target_ids[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, target_ids[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * (mask / count)[..., None],)

    return _emit("cross_entropy", (logits,), np.asarray(loss), back)


def l2_normalize_rows(x, eps: float = 0.0) -> Tensor:
    """Divide each row (last axis) by its L2 norm; all-zero rows stay zero."""
    x = as_tensor(x)
    xv = x.values
    norm = np.sqrt((xv * xv).sum(axis=-1, keepdims=True))
    safe = np.where(norm > eps, norm, 1.0)
    live = norm > eps
    out = np.where(live, xv / safe, 0.0)

    def back(g):
        gx = (g - out * (g * out).sum(axis=-1, keepdims=True)) / safe
        return (np.where(live, gx, 0.0),)

    return _emit("l2_normalize_rows", (x,), out, back)


# ---------------------------------------------------------------- backward


def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if root.values.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    tape = current_tape() if tape is None else tape
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-12,
) -> float:
    """Max |analytic - central difference| / (|central difference| + floor).

    ``f`` rebuilds the scalar from the current parameter values. When
    ``max_entries`` is set, at most that many entries per parameter are probed
    (chosen with ``rng``); the analytic gradient is always computed in full.
    ``floor`` keeps entries at the float64 resolution of the difference
    quotient (about eps * |f| / h) from dominating the ratio.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.zero_grad()
    with recording() as tape:
        out = f()
    if not np.isfinite(out.values).all():
        raise NumericError("non-finite objective in finite-difference check")
    backward(out, tape)
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        if not p.values.flags.c_contiguous:
            raise ValueError(f"parameter {p.name or p.shape} must be C-contiguous")
        flat = p.values.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = f().item()
            flat[i] = orig - h
            with no_grad():
                fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite objective in finite-difference check")
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / (abs(numeric) + floor)
            worst = max(worst, err)
    return worst
