"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation used by the model lives here. Operations
record themselves on the thread's active :class:`Tape` when at least one
input requires a gradient; :func:`backward` replays the tape in reverse and
then clears it.

Broadcasting is deliberately narrow: operands must have equal shapes, equal
rank (numpy size-1 broadcasting), or one side must be a scalar or a 1-D row
vector matching the other's last axis. Anything else raises
:class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

# Set to True to assert finiteness on every constructed tensor.
DEBUG = False


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """Backward was requested for something that is not on the active tape."""


@dataclass
class _Node:
    out: "Tensor"
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    nodes: list[_Node] = field(default_factory=list)
    enabled: bool = True

    def record(self, out, parents, backward):
        self.nodes.append(_Node(out, tuple(parents), backward))

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def new_tape():
    """Run the block against a fresh tape, restoring the previous one after."""
    prev = getattr(_local, "tape", None)
    _local.tape = Tape()
    try:
        yield _local.tape
    finally:
        _local.tape = prev


@contextlib.contextmanager
def no_grad():
    tape = active_tape()
    prev, tape.enabled = tape.enabled, False
    try:
        yield
    finally:
        tape.enabled = prev


class Tensor:
    """N-dimensional float64 array that can take part in differentiation.

    ``data`` should be treated as read-only once constructed; only ``grad``
    is mutated (by :func:`backward`).
    """

    __slots__ = ("data", "requires_grad", "grad", "_is_leaf", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if DEBUG:
            assert np.all(np.isfinite(arr)), "non-finite value stored in Tensor"
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    tape = active_tape()
    req = tape.enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._is_leaf = False
        tape.record(out, parents, backward)
    return out


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


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    sa, sb = a.shape, b.shape
    if sa == sb or a.data.size == 1 and a.ndim <= 1 or b.data.size == 1 and b.ndim <= 1:
        return
    ok = False
    if len(sa) == len(sb):
        ok = all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb))
    elif len(sb) == 1 and sa and sa[-1] == sb[0]:
        ok = True
    elif len(sa) == 1 and sb and sb[-1] == sa[0]:
        ok = True
    if not ok:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * out / bd, bd.shape))

    return _make(out, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a) -> Tensor:
    """max(a, 0); the subgradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def back(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _make(x * cdf, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes batch.

    The right operand may be a plain 2-D matrix shared across the batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2 or sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: incompatible shapes {sa} and {sb}")
    if b.ndim > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ in {sa} and {sb}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _make(ad @ bd, (a, b), back)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------
# composite kernels with hand-written backward rules


def softmax(x, mask=None) -> Tensor:
    """Softmax over the last axis, optionally restricted to ``mask`` columns.

    ``mask`` is a 0/1 array broadcastable to ``x`` along the last axis. Masked
    columns come out exactly 0 and the surviving columns renormalize among
    themselves. A mask of all ones gives bit-identical output to no mask.
    Every row must keep at least one column.
    """
    x = as_tensor(x)
    xd = x.data
    if mask is None:
        z = np.exp(xd - xd.max(axis=-1, keepdims=True))
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not keep.any(axis=-1).all():
            raise ValueError("softmax: every row must keep at least one column")
        shifted = xd - np.where(keep, xd, -np.inf).max(axis=-1, keepdims=True)
        z = np.where(keep, np.exp(np.where(keep, shifted, 0.0)), 0.0)
    y = z / z.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back)


def softmax_rows(x, mask=None) -> Tensor:
    """Row-wise softmax of a 2-D tensor (alias of :func:`softmax`)."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, mask)


def layer_norm(x, weight, bias, eps: float = 1e-6) -> Tensor:
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    wd = weight.data
    n = xd.shape[-1]

    def back(g):
        gw = _unbroadcast(g * xhat, weight.shape)
        gb = _unbroadcast(g, bias.shape)
        gh = g * wd
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gw, gb

    return _make(xhat * wd + bias.data, (x, weight, bias), back)


def masked_max(x, mask=None, axis: int = -1) -> Tensor:
    """Max over ``axis`` considering only positions where ``mask`` is set.

    The gradient goes entirely to the first maximizing position.
    """
    x = as_tensor(x)
    xd = x.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not keep.any(axis=axis).all():
            raise ValueError("masked_max: mask keeps no position")
        xd = np.where(keep, xd, -np.inf)
    arg = np.expand_dims(xd.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), back)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {z.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= z.shape[1]:
        raise ValueError(f"cross_entropy: label out of range [0, {z.shape[1]})")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = (lse - z[rows, labels]).mean()

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / z.shape[0],)

    return _make(loss, (logits,), back)


# ---------------------------------------------------------------------------


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requiring leaf.

    The active tape is consumed and cleared.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor requiring grad")
    tape = active_tape()
    if loss._is_leaf:
        loss.grad = np.ones(loss.shape) if loss.grad is None else loss.grad + 1.0
        return
    start = None
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i].out is loss:
            start = i
            break
    if start is None:
        raise TapeError("loss was not produced on the active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes[: start + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg, dtype=np.float64), parent.shape)
            if parent._is_leaf:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    tape.clear()
