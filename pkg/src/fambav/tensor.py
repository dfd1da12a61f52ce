"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays; differentiable operations append entries to an
ambient tape in execution order (which is already topological), and
``backward`` replays the tape in exact reverse, accumulating gradients via
the chain rule. Binary ops broadcast with trailing-axis alignment.

Precision policy: tensors keep whatever float dtype they are built with;
tests run the engine at 64-bit, training at 32-bit.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import memory
from .errors import ContractError, IndexRangeError, NumericalError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "set_finite_checks",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sigmoid",
    "silu",
    "softplus",
    "expm1",
    "phi1",
    "elementwise",
    "layernorm",
    "mean",
    "tsum",
    "concat",
    "slice_axis",
    "gather_rows",
    "transpose",
    "reshape",
    "broadcast_to",
    "softmax_lastaxis",
    "log_softmax_lastaxis",
    "flip_axis",
    "register_op",
    "backward",
]

# Series/closed-form switch for phi1(z) = (e^z - 1)/z.
_PHI1_SWITCH = 1e-4


class Tensor:
    """A dense numeric array, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "iub" and dtype is None:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        memory.track(self, arr.nbytes)

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"

    # Operator sugar; scalars are lifted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


class _Node:
    """One executed op on the tape: output, inputs, and the local vjp."""

    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], grad_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tape:
    """Ordered record of executed differentiable operations.

    Entries are appended in execution order, so inputs always precede the
    ops that consume them; backward walks the list in exact reverse. A tape
    belongs to one run and is cleared after each backward pass.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []

    def record(self, node: _Node) -> None:
        self._nodes.append(node)

    def __len__(self) -> int:
        return len(self._nodes)

    def clear(self) -> None:
        self._nodes.clear()

    def replay_backward(self, loss: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            holders.pop(id(node.out), None)
            if g is None:
                continue
            if node.out.requires_grad:
                node.out.grad = g if node.out.grad is None else node.out.grad + g
            input_grads = node.grad_fn(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    holders[key] = inp
        # Remaining entries are leaves (no producing node on the tape).
        for key, g in grads.items():
            t = holders[key]
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


class _TapeState(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.enabled = True
        self.finite_checks = False


_state = _TapeState()


def current_tape() -> Tape:
    return _state.tape


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        self._prev = _state.enabled
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


def set_finite_checks(on: bool) -> None:
    """When on, every op asserts its output is finite (debug aid)."""
    _state.finite_checks = bool(on)


def backward(loss: Tensor) -> None:
    """Populate grads of every grad-enabled tensor reachable from `loss`.

    The loss must be a scalar (element count 1). The tape is cleared
    afterward, so each forward/backward pair owns its own recording.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    try:
        tape.replay_backward(loss)
    finally:
        tape.clear()


def _finish(out_data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    requires = _state.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires:
        _state.tape.record(_Node(out, inputs, grad_fn))
    if _state.finite_checks and not np.all(np.isfinite(out_data)):
        raise NumericalError("operation produced non-finite values")
    return out


def register_op(out_data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    """Wrap a custom differentiable op: `grad_fn(out_grad)` must return one
    gradient array (or None) per input, in order."""
    return _finish(out_data, inputs, grad_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of trailing-axis broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(g):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if need_b:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _finish(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# pointwise ops


def _binary(a: Tensor, b: Tensor, fwd, vjp_a, vjp_b) -> Tensor:
    out = fwd(a.data, b.data)

    def grad_fn(g):
        return (
            _unbroadcast(vjp_a(g, a.data, b.data, out), a.shape),
            _unbroadcast(vjp_b(g, a.data, b.data, out), b.shape),
        )

    return _finish(out, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        return _binary(
            a,
            b,
            np.divide,
            lambda g, x, y, o: g / y,
            lambda g, x, y, o: -g * x / (y * y),
        )


def _unary(a: Tensor, fwd, vjp) -> Tensor:
    out = fwd(a.data)

    def grad_fn(g):
        return (vjp(g, a.data, out),)

    return _finish(out, (a,), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _unary(a, np.negative, lambda g, x, o: -g)


def exp(a: Tensor) -> Tensor:
    return _unary(a, np.exp, lambda g, x, o: g * o)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        return _unary(a, np.log, lambda g, x, o: g / x)


def expm1(a: Tensor) -> Tensor:
    return _unary(a, np.expm1, lambda g, x, o: g * (o + 1.0))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of -|x| never overflows; both branches share it.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    return _unary(a, _sigmoid, lambda g, x, o: g * o * (1.0 - o))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def grad_fn(g):
        return (g * (s + out * (1.0 - s)),)

    return _finish(out, (a,), grad_fn)


def softplus(a: Tensor) -> Tensor:
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda g, x, o: g * _sigmoid(x))


def phi1_value(z: np.ndarray) -> np.ndarray:
    """(e^z - 1)/z evaluated stably; phi1(0) = 1 exactly.

    Below the switch threshold a truncated series 1 + z/2 + z^2/6 + z^3/24
    is used; above it, expm1 avoids the cancellation of e^z - 1.
    """
    z = np.asarray(z)
    small = np.abs(z) < _PHI1_SWITCH
    if not small.any():
        return np.expm1(z) / z
    series = 1.0 + z / 2.0 + (z * z) / 6.0 + (z * z * z) / 24.0
    with np.errstate(divide="ignore", invalid="ignore"):
        closed = np.where(small, 1.0, np.expm1(z) / np.where(small, 1.0, z))
    return np.where(small, series, closed)


def phi1_grad(z: np.ndarray) -> np.ndarray:
    """Derivative of phi1: (e^z (z - 1) + 1) / z^2, with a small-|z| series."""
    z = np.asarray(z)
    small = np.abs(z) < _PHI1_SWITCH
    if not small.any():
        return (np.exp(z) * (z - 1.0) + 1.0) / (z * z)
    series = 0.5 + z / 3.0 + (z * z) / 8.0 + (z * z * z) / 30.0
    zsafe = np.where(small, 1.0, z)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        closed = (np.exp(zsafe) * (zsafe - 1.0) + 1.0) / (zsafe * zsafe)
    return np.where(small, series, closed)


def phi1(a: Tensor) -> Tensor:
    return _unary(a, phi1_value, lambda g, x, o: g * phi1_grad(x))


_ELEMENTWISE_UNARY = {
    "neg": neg,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "silu": silu,
    "softplus": softplus,
    "expm1": expm1,
}
_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch a pointwise op by name (handy for looping over the family)."""
    if op_kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ShapeError(f"{op_kind} is unary")
        return _ELEMENTWISE_UNARY[op_kind](a)
    if op_kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return _ELEMENTWISE_BINARY[op_kind](a, b)
    raise ShapeError(f"unknown elementwise op kind: {op_kind!r}")


# ---------------------------------------------------------------------------
# normalization / softmax


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply affine."""
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layernorm over an empty last axis")
    if eps <= 0:
        raise ContractError(f"layernorm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gxhat = g * gain.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = (gxhat - m1 - xhat * m2) * inv
        reduce_axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=reduce_axes)
        gbias = g.sum(axis=reduce_axes)
        return gx, ggain, gbias

    return _finish(out, (x, gain, bias), grad_fn)


def softmax_lastaxis(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _finish(out, (x,), grad_fn)


def log_softmax_lastaxis(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _finish(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _finish(out, (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        count = int(np.prod([x.shape[a] for a in axis]))

    def grad_fn(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy() / count,)

    return _finish(out, (x,), grad_fn)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty sequence")
    axis = axis % parts[0].ndim
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _finish(out, tuple(parts), grad_fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    if not (0 <= start <= stop <= n):
        raise IndexRangeError(f"slice [{start}:{stop}] out of range for extent {n}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = x.data[index]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _finish(out, (x,), grad_fn)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows along axis 0 by integer index (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    n = x.shape[0]
    bad = (idx < 0) | (idx >= n)
    if bad.any():
        offender = int(idx[np.argmax(bad)]) if idx.ndim else int(idx)
        raise IndexRangeError(f"gather_rows index {offender} out of range [0, {n})")
    out = x.data[idx]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _finish(out, (x,), grad_fn)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(a % x.ndim for a in axes)
    inverse = np.argsort(axes)
    out = np.transpose(x.data, axes)

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _finish(out, (x,), grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _finish(out, (x,), grad_fn)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape).copy()

    def grad_fn(g):
        return (_unbroadcast(g, x.shape),)

    return _finish(out, (x,), grad_fn)


def flip_axis(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    out = np.flip(x.data, axis=axis).copy()

    def grad_fn(g):
        return (np.flip(g, axis=axis).copy(),)

    return _finish(out, (x,), grad_fn)
