"""Dense arrays with tape-based reverse-mode differentiation.

Every operation in this module takes and returns :class:`Tensor` objects.
When a :class:`Tape` is active and at least one operand requires a
gradient, the operation appends a closure computing its vector-Jacobian
product to the tape.  :func:`backward` replays the tape in reverse.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(matmul(x, w) * 2.0)
    backward(loss, tape)
    w.grad  # ndarray of shape (3, 2)
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float64
_FLOAT_TYPES = (np.float32, np.float64)

_tape_stack: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self.entries: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], vjp: Callable) -> None:
        self.entries.append((out, inputs, vjp))

    def clear(self) -> None:
        self.entries.clear()


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    """N-dimensional real array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in _FLOAT_TYPES else DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = ""
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

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = x.dtype if isinstance(x, np.ndarray) and x.dtype in _FLOAT_TYPES else DEFAULT_DTYPE
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``inputs``.

    ``vjp(g)`` receives the output gradient and returns one gradient (or
    None) per input.  Nothing is recorded when no tape is active or no
    input requires a gradient.
    """
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), vjp)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the axes that broadcasting added or stretched."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss`` on ``tape``.

    Gradients accumulate into existing ``.grad`` buffers of leaf tensors, so
    callers zero them between steps.  The tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, vjp in reversed(tape.entries):
        g = grads.pop(id(out), None)
        holders.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = inp
    # anything left is a leaf of this tape
    for key, g in grads.items():
        leaf = holders[key]
        if not np.isfinite(g).all():
            tape.clear()
            raise NumericError(f"non-finite gradient for {leaf.name or leaf!r}")
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    tape.clear()


# ---------------------------------------------------------------- arithmetic


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return custom_op(a.data * b.data, (a, b),
                     lambda g: (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                                unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return custom_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from exc

    def vjp(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(out, (a, b), vjp)


# ----------------------------------------------------------- reductions, shape


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return custom_op(np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return custom_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, key) -> Tensor:
    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return custom_op(np.asarray(x.data[key]), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                     lambda g: tuple(np.split(g, splits, axis=axis)))


def sparse_matmul(matrix, x: Tensor) -> Tensor:
    """Product of a constant scipy sparse matrix with ``x`` (rank 2)."""
    if matrix.shape[1] != x.shape[0]:
        raise DimensionError(f"sparse product extents differ: {matrix.shape} @ {x.shape}")
    return custom_op(np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(matrix.T @ g),))


# ------------------------------------------------------------- elementwise


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return custom_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return custom_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return custom_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return custom_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    return custom_op(np.logaddexp(0.0, x.data), (x,), lambda g: (g * special.expit(x.data),))


def relu(x: Tensor) -> Tensor:
    return custom_op(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + _GELU_K * x2))
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        dt = _GELU_C * (1.0 + 3.0 * _GELU_K * x2) * (1.0 - t * t)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return custom_op(out, (x,), vjp)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax over an empty last dimension: {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return custom_op(y, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm affine shape {gain.shape}/{bias.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx,
                (g * xhat).sum(axis=lead) if gain.requires_grad else None,
                g.sum(axis=lead) if bias.requires_grad else None)

    return custom_op(out, (x, gain, bias), vjp)


def transposed_conv_2x(x: Tensor, kernel: Tensor) -> Tensor:
    """Stride-2, 2x2 transposed convolution without bias.

    ``x`` is ``[..., C_in, N, N]`` and ``kernel`` is ``[C_in, C_out, 2, 2]``;
    input pixel (i, j) writes only the output block (2i:2i+2, 2j:2j+2).
    """
    if x.ndim < 3 or x.shape[-1] != x.shape[-2]:
        raise DimensionError(f"transposed_conv_2x needs square [..., C, N, N] input, got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2:] != (2, 2) or kernel.shape[0] != x.shape[-3]:
        raise DimensionError(f"kernel {kernel.shape} incompatible with input {x.shape}")
    n = x.shape[-1]
    c_out = kernel.shape[1]
    blocks = np.einsum("...cij,coab->...oiajb", x.data, kernel.data, optimize=True)
    out = blocks.reshape(x.shape[:-3] + (c_out, 2 * n, 2 * n))

    def vjp(g):
        gb = g.reshape(x.shape[:-3] + (c_out, n, 2, n, 2))
        gx = np.einsum("...oiajb,coab->...cij", gb, kernel.data, optimize=True) if x.requires_grad else None
        gk = None
        if kernel.requires_grad:
            gk = np.einsum("...oiajb,...cij->coab", gb, x.data, optimize=True)
        return gx, gk

    return custom_op(out, (x, kernel), vjp)


# ------------------------------------------------------------- verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: Optional[float] = None) -> float:
    """Max relative error between the tape gradient and central differences.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.  The default
    step is ``1e-6 * (1 + |x_i|)``.  ``x`` is perturbed in place and restored.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise NumericError("f(x) is not finite")
    backward(y, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    x.requires_grad = was

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        step = h if h is not None else 1e-6 * (1.0 + abs(orig))
        flat[i] = orig + step
        fp = f(x).item()
        flat[i] = orig - step
        fm = f(x).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("f(x) is not finite near the check point")
        num = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
