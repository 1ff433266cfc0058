"""Dense tensor engine with tape-based reverse-mode differentiation.

Values are row-major numpy arrays. Each operation that sees a tensor
requiring gradients records a closure that maps the output gradient back
to its inputs, so one training step builds one implicit tape and a single
``backward`` call walks it in reverse topological order. Gradients
accumulate into ``Tensor.grad`` until explicitly reset.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Precision",
    "ShapeError",
    "NonFiniteError",
    "BatchSizeError",
    "BatchNormState",
    "backward",
    "zero_grad",
    "matmul",
    "linear",
    "relu",
    "sigmoid",
    "log",
    "clamp",
    "softmax_rows",
    "transpose_last",
    "concat",
    "narrow",
    "batch_norm",
    "glorot_uniform",
    "set_finite_checks",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested kernel."""


class NonFiniteError(ArithmeticError):
    """A forward kernel produced NaN or infinity."""


class BatchSizeError(ValueError):
    """Batch statistics were requested for a batch that is too small."""


class Precision(Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> type:
        return np.float32 if self is Precision.SINGLE else np.float64

    @classmethod
    def from_name(cls, name: str) -> "Precision":
        for member in cls:
            if member.value == name:
                return member
        raise ValueError(f"unknown precision {name!r}; expected 'single' or 'double'")


# Finiteness is asserted after every forward kernel; gradcheck and the
# training loop rely on the failure surfacing at the op that caused it.
_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle post-kernel finiteness checks, returning the previous setting."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    return previous


GradFn = Callable[[np.ndarray], tuple]


class Tensor:
    """A dense array plus the bookkeeping reverse mode needs.

    ``grad`` is lazily allocated: absent until a backward pass reaches the
    tensor, then a same-shape buffer that accumulates across passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # Arithmetic sugar. Scalars and plain arrays are wrapped as constant
    # tensors in this tensor's dtype so mixed expressions never upcast.
    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._wrap(other))

    def __radd__(self, other):
        return add(self._wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(self._wrap(other)))

    def __rsub__(self, other):
        return add(self._wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, self._wrap(other))

    def __rmul__(self, other):
        return mul(self._wrap(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a kernel; divide by a scalar")
        return mul(self, self._wrap(1.0 / other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._wrap(other))

    def sum(self) -> "Tensor":
        out = np.asarray(self.data.sum())

        def grad_fn(g):
            return (np.broadcast_to(g, self.data.shape),)

        return _result(out, (self,), grad_fn, "sum")

    def mean(self, axis: int | None = None) -> "Tensor":
        if axis is None:
            scale = 1.0 / self.data.size
            out = np.asarray(self.data.mean())

            def grad_fn(g):
                return (np.broadcast_to(g * scale, self.data.shape),)

            return _result(out, (self,), grad_fn, "mean")

        count = self.data.shape[axis]
        out = self.data.mean(axis=axis)
        # keep a positive axis for expand_dims inside the closure
        pos_axis = axis if axis >= 0 else self.data.ndim + axis

        def grad_fn_axis(g):
            expanded = np.expand_dims(g, pos_axis) / count
            return (np.broadcast_to(expanded, self.data.shape),)

        return _result(out, (self,), grad_fn_axis, "mean")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.data.shape
        out = self.data.reshape(shape)

        def grad_fn(g):
            return (g.reshape(original),)

        return _result(out, (self,), grad_fn, "reshape")


def _result(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: GradFn, op: str) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out._parents = ()
        out._grad_fn = None
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out axes that broadcasting introduced so grad matches shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    kept = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if kept:
        grad = grad.sum(axis=kept, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Push dLoss/d(node) to every requires_grad tensor on the tape.

    The loss must be a scalar. Gradients add into any buffers a previous
    pass left behind; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.array(g, copy=True)
        else:
            node.grad = node.grad + g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = flows.get(id(parent))
            flows[id(parent)] = pg if held is None else held + pg


def zero_grad(params) -> None:
    """Drop gradient buffers on an iterable or mapping of tensors."""
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        p.grad = None


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"add: cannot broadcast shapes {a.data.shape} and {b.data.shape}") from None
    out = a.data + b.data

    def grad_fn(g):
        ga = _reduce_to(g, a.data.shape) if a.requires_grad else None
        gb = _reduce_to(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast shapes {a.data.shape} and {b.data.shape}") from None
    out = a.data * b.data

    def grad_fn(g):
        ga = _reduce_to(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn, "mul")


def neg(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (-g,)

    return _result(-a.data, (a,), grad_fn, "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.data.shape} and {b.data.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to(g @ b.data.swapaxes(-1, -2), a.data.shape)
        if b.requires_grad:
            gb = _reduce_to(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return _result(out, (a, b), grad_fn, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the last axis: x @ w + b."""
    if w.data.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-d, got {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias shape {b.data.shape} does not match weight {w.data.shape}")
    if x.data.ndim < 1 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear: input shape {x.data.shape} does not match weight {w.data.shape}")
    if x.data.ndim == 1:
        return add(matmul(x.reshape(1, -1), w).reshape(-1), b)
    return add(matmul(x, w), b)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def grad_fn(g):
        return (g * (x.data > 0),)

    return _result(out, (x,), grad_fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), grad_fn, "sigmoid")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def grad_fn(g):
        return (g / x.data,)

    return _result(out, (x,), grad_fn, "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)

    def grad_fn(g):
        return (g * ((x.data >= lo) & (x.data <= hi)),)

    return _result(out, (x,), grad_fn, "clamp")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _result(out, (x,), grad_fn, "softmax_rows")


def transpose_last(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"transpose_last: need at least 2 axes, got {x.data.shape}")
    out = x.data.swapaxes(-1, -2)

    def grad_fn(g):
        return (g.swapaxes(-1, -2),)

    return _result(out, (x,), grad_fn, "transpose_last")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    arrays = [p.data for p in parts]
    out = np.concatenate(arrays, axis=axis)
    pos_axis = axis if axis >= 0 else out.ndim + axis
    sizes = [a.shape[pos_axis] for a in arrays]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        moved = np.moveaxis(g, pos_axis, 0)
        slices = []
        for start, size in zip(offsets[:-1], sizes):
            slices.append(np.moveaxis(moved[start:start + size], 0, pos_axis))
        return tuple(slices)

    return _result(out, tuple(parts), grad_fn, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """A contiguous slice of ``length`` entries along ``axis``."""
    pos_axis = axis if axis >= 0 else x.data.ndim + axis
    if not (0 <= start and length >= 0 and start + length <= x.data.shape[pos_axis]):
        raise ShapeError(f"narrow: [{start}, {start + length}) is outside axis {axis} of {x.data.shape}")
    index = [slice(None)] * x.data.ndim
    index[pos_axis] = slice(start, start + length)
    index = tuple(index)
    out = x.data[index]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(out, (x,), grad_fn, "narrow")


@dataclass
class BatchNormState:
    """Running statistics, updated in train mode and read in eval mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, width: int, dtype=np.float32) -> "BatchNormState":
        return cls(mean=np.zeros(width, dtype=dtype), var=np.ones(width, dtype=dtype))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy())


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize columns of a [batch, width] input.

    Train mode normalizes by biased batch statistics and folds them into
    the running state; eval mode reads the state and never writes it. The
    train-mode gradient goes through the batch mean and variance.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"batch_norm: expected [batch, width] input, got {x.data.shape}")
    width = x.data.shape[1]
    if gamma.data.shape != (width,) or beta.data.shape != (width,):
        raise ShapeError(
            f"batch_norm: scale {gamma.data.shape} / shift {beta.data.shape} do not match width {width}"
        )

    if training:
        n = x.data.shape[0]
        if n < 2:
            raise BatchSizeError(f"batch_norm: train mode needs at least 2 rows, got {n}")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        state.mean[...] = (1.0 - momentum) * state.mean + momentum * mu
        state.var[...] = (1.0 - momentum) * state.var + momentum * var
        out = gamma.data * xhat + beta.data

        def grad_fn(g):
            gx = ggamma = gbeta = None
            if x.requires_grad:
                dxhat = g * gamma.data
                gx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            if gamma.requires_grad:
                ggamma = (g * xhat).sum(axis=0)
            if beta.requires_grad:
                gbeta = g.sum(axis=0)
            return gx, ggamma, gbeta

        return _result(out, (x, gamma, beta), grad_fn, "batch_norm")

    inv = 1.0 / np.sqrt(state.var + eps)
    xhat = (x.data - state.mean) * inv
    out = gamma.data * xhat + beta.data

    def grad_fn(g):
        gx = g * gamma.data * inv if x.requires_grad else None
        ggamma = (g * xhat).sum(axis=0) if gamma.requires_grad else None
        gbeta = g.sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), grad_fn, "batch_norm")


def glorot_uniform(shape: tuple[int, int], rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Uniform init on [-b, b] with b = sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
