"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Operations record themselves onto the active :class:`Tape` whenever at least
one input requires a gradient. Outside a tape every op is a plain numpy
computation, which is how evaluation runs.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(x * x)
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "TapeError", "DimensionError", "NonFiniteError",
    "backward", "set_nan_check", "nan_check",
    "add", "sub", "mul", "neg", "scale", "exp", "sum_", "mean", "matmul",
    "transpose", "reshape", "broadcast_to", "concat", "slice_axis", "split",
    "stack", "gather_rows", "softmax", "layer_norm", "rms_norm", "gelu", "l2_normalize",
    "cross_entropy_rows", "OPS",
]

# names under which differentiable primitives record onto a tape
OPS = frozenset({
    "add", "sub", "mul", "neg", "scale", "exp", "sum", "gelu", "matmul", "transpose",
    "reshape", "broadcast_to", "concat", "slice", "gather_rows", "softmax", "layer_norm",
    "rms_norm", "l2_normalize", "cross_entropy_rows",
})

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (replay, detached loss, non-scalar loss)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN/Inf while nan-check mode was enabled."""


def set_nan_check(enabled: bool) -> None:
    _state.nan_check = bool(enabled)


class nan_check:
    """Context manager enabling the finite-value check after every op."""

    def __enter__(self):
        self._prev = getattr(_state, "nan_check", False)
        set_nan_check(True)
        return self

    def __exit__(self, *exc):
        set_nan_check(self._prev)
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if 0 in arr.shape:
            raise DimensionError(f"zero extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._leaf = True

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t._leaf = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Node:
    __slots__ = ("name", "out", "inputs", "backward")

    def __init__(self, name, out, inputs, backward):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Entering the tape makes it the recording target for the current thread.
    A tape supports exactly one :meth:`backward` call.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def op_names(self) -> list[str]:
        return [n.name for n in self._nodes]

    def _push(self, name: str, out: Tensor, inputs: tuple, fn: Callable) -> None:
        if self._consumed:
            raise TapeError("cannot record onto a tape that has already run backward")
        self._nodes.append(_Node(name, out, inputs, fn))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("tape already replayed; record a fresh forward pass")
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss was not produced on this tape (detached)")
        self._consumed = True
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if t._leaf:
                    t.grad += gi
                else:
                    prev = pending.get(id(t))
                    pending[id(t)] = gi if prev is None else prev + gi
        # drop references so intermediate buffers can be freed
        self._nodes = []


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, data: np.ndarray, inputs: tuple, fn: Callable) -> Tensor:
    if getattr(_state, "nan_check", False) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    tape = _active_tape()
    track = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor._from_op(data, track)
    if track:
        tape._push(name, out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _emit("mul", ad * bd, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(y, dtype=np.float64), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = math.prod(x.shape[i] for i in axes)
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    c = math.sqrt(2.0 / math.pi)
    k = 0.044715
    xd = x.data
    th = xd * xd
    th *= k * c
    th += c
    th *= xd
    np.tanh(th, out=th)
    y = th + 1.0
    y *= xd
    y *= 0.5

    def bw(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3k x^2)
        t = xd * xd
        t *= 3 * k
        t += 1.0
        s_ = th * th
        np.subtract(1.0, s_, out=s_)
        s_ *= xd
        s_ *= 0.5 * c
        s_ *= t
        s_ += 0.5
        t = th * 0.5
        s_ += t
        s_ *= g
        return (s_,)

    return _emit("gelu", y, (x,), bw)


# -- linear algebra and shape ----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes are batch axes."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # fold batch axes into one GEMM
        k = ad.shape[-1]
        a2 = ad.reshape(-1, k)
        y = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit("matmul", y, (a, b), bw)
    try:
        y = np.matmul(ad, bd)
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _emit("matmul", y, (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs rank >= 2, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: invalid permutation {axes} for {x.shape}")
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(np.transpose(x.data, axes))
    return _emit("transpose", y, (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _emit("reshape", y, (x,), lambda g: (g.reshape(src),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        y = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: {src} -> {shape}") from None
    return _emit("broadcast_to", y, (x,), lambda g: (_unbroadcast(g, src),))


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ax = _axis(axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {ax}")
    y = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _emit("concat", y, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = _axis(axis, x.ndim)
    if not 0 <= start < stop <= x.shape[ax]:
        raise DimensionError(f"slice [{start}:{stop}] invalid for extent {x.shape[ax]}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    src = x.shape

    def bw(g):
        full = np.zeros(src)
        full[idx] = g
        return (full,)

    return _emit("slice", np.ascontiguousarray(x.data[idx]), (x,), bw)


def split(x: Tensor, axis: int, parts: int) -> list[Tensor]:
    ax = _axis(axis, x.ndim)
    n = x.shape[ax]
    if parts <= 0 or n % parts:
        raise DimensionError(f"split: extent {n} not divisible into {parts} parts")
    w = n // parts
    return [slice_axis(x, ax, i * w, (i + 1) * w) for i in range(parts)]


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ax = axis if axis >= 0 else axis + tensors[0].ndim + 1
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors], axis=ax)


def gather_rows(table: Tensor, indices) -> Tensor:
    """``table[indices]`` for an integer index array of any shape."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise DimensionError("gather_rows: indices must be integers")
    if table.ndim < 1 or (idx.size and (idx.min() < 0 or idx.max() >= table.shape[0])):
        raise DimensionError(f"gather_rows: index out of range for table {table.shape}")
    src = table.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("gather_rows", table.data[idx], (table,), bw)


# -- normalisation and probabilities --------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax. ``mask`` (broadcastable bool) marks admissible entries."""
    ax = _axis(axis, x.ndim)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=ax, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=ax, keepdims=True)),)

    return _emit("softmax", y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if not eps > 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs last extent {d}")
    xd = x.data
    xhat = xd - xd.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None]
    var /= d
    var += eps
    rstd = 1.0 / np.sqrt(var)
    xhat *= rstd
    y = xhat * gain.data
    y += bias.data
    gd = gain.data

    def bw(g):
        gx = gg = gb = None
        g2 = g.reshape(-1, d)
        if gain.requires_grad:
            gg = np.einsum("ni,ni->i", g2, xhat.reshape(-1, d))
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            proj = np.einsum("...i,...i->...", gh, xhat)[..., None]
            proj /= d
            gx = gh - gh.mean(axis=-1, keepdims=True)
            gx -= xhat * proj
            gx *= rstd
        return gx, gg, gb

    return _emit("layer_norm", y, (x, gain, bias), bw)


def rms_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Parameter-free RMS normalisation over the last axis."""
    xd = x.data
    rinv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    y = xd * rinv

    def bw(g):
        return (rinv * (g - y * (g * y).mean(axis=-1, keepdims=True)),)

    return _emit("rms_norm", y, (x,), bw)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(axis, x.ndim)
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=ax, keepdims=True))
    if np.any(norm == 0):
        raise FloatingPointError("l2_normalize: zero-norm slice")
    y = xd / norm

    def bw(g):
        return ((g - y * np.sum(g * y, axis=ax, keepdims=True)) / norm,)

    return _emit("l2_normalize", y, (x,), bw)


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits[i])[targets[i]]``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_rows expects a matrix, got {logits.shape}")
    t = np.asarray(targets)
    n, k = logits.shape
    if t.shape != (n,) or t.dtype.kind not in "iu" or (t.min() < 0 or t.max() >= k):
        raise DimensionError(f"cross_entropy_rows: bad targets for logits {logits.shape}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, t])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return (p * (g / n),)

    return _emit("cross_entropy_rows", np.asarray(loss), (logits,), bw)
