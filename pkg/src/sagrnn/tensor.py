"""Dense 64-bit tensors with define-by-run reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass.  Calling
``SomeFunction.apply(*tensors, **kwargs)`` runs ``forward`` on raw arrays and
records the node on the output tensor; :meth:`Tensor.backward` walks the
recorded DAG in reverse topological order and accumulates gradients.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64

_grad_enabled = True
_check_numerics = True


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A forward value or a gradient became NaN or infinite."""


class UsageError(RuntimeError):
    """The autodiff API was used incorrectly (e.g. non-scalar backward root)."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def numeric_checks(enabled: bool):
    """Toggle the per-op NaN/Inf checks (on by default).

    Callers that switch them off must check their final results themselves.
    """
    global _check_numerics
    prev = _check_numerics
    _check_numerics = enabled
    try:
        yield
    finally:
        _check_numerics = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a single reduction propagates any NaN/Inf
    if _check_numerics and not np.isfinite(np.sum(arr)):
        raise NumericError(f"non-finite values in {what}")


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """A node on the tape.

    ``forward`` receives numpy arrays and may stash whatever the backward rule
    needs on ``self``.  ``backward`` receives the output gradient and returns
    one gradient (or ``None``) per input tensor.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    @property
    def name(self) -> str:
        return type(self).__name__

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs) -> "Tensor":
        inputs = tuple(as_tensor(t) for t in inputs)
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        out = np.asarray(out, dtype=DTYPE)
        _check_finite(out, f"forward of {fn.name}")
        needs = _grad_enabled and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=needs)
        if needs:
            result._ctx = fn
        return result


class Tensor:
    """Row-major array of float64 with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._ctx: Optional[Function] = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *order):
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = tuple(order[0])
        return permute(self, order)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``root``.

    Gradients from fan-out are summed.  Leaf gradients accumulate across
    calls; call :meth:`Tensor.zero_grad` (or ``zero_grads``) between steps.
    """
    if grad is None:
        if root.data.size != 1:
            raise UsageError(f"backward root must be scalar, got shape {root.shape}")
        grad = np.ones_like(root.data)
    if not root.requires_grad:
        raise UsageError("backward root does not require grad")
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        fn = node._ctx
        if fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        in_grads = fn.backward(g)
        for parent, pg in zip(fn.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            if pg.shape != parent.shape:
                pg = unbroadcast(pg, parent.shape)
            _check_finite(pg, f"gradient of {fn.name}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise NumericError("log of a non-positive value")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, a):
        self.out = _sigmoid(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out**2),)


class PRelu(Function):
    """max(x, 0) + a * min(x, 0) with one slope per channel along ``axis``."""

    def forward(self, x, slope, axis=0):
        axis = axis % x.ndim
        self.axis = axis
        shape = [1] * x.ndim
        shape[axis] = x.shape[axis]
        if slope.shape != (x.shape[axis],):
            raise DimensionError(f"prelu slope shape {slope.shape} vs channels {x.shape[axis]}")
        self.slope = slope.reshape(shape)
        self.x = x
        self.pos = x > 0
        return np.where(self.pos, x, self.slope * x)

    def backward(self, grad):
        # subgradient 0 at x == 0
        dx = np.where(self.pos, grad, np.where(self.x < 0, grad * self.slope, 0.0))
        reduce_axes = tuple(i for i in range(self.x.ndim) if i != self.axis)
        dslope = np.where(self.pos, 0.0, grad * self.x).sum(axis=reduce_axes)
        return dx, dslope


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * np.tanh(0.5 * a) + 0.5


def add(a, b) -> Tensor:
    return _broadcast_binary(Add, a, b)


def sub(a, b) -> Tensor:
    return _broadcast_binary(Sub, a, b)


def mul(a, b) -> Tensor:
    return _broadcast_binary(Mul, a, b)


def _broadcast_binary(cls, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{cls.__name__}: cannot broadcast {a.shape} and {b.shape}") from exc
    return cls.apply(a, b)


def combine(x, y, kind: str = "add") -> Tensor:
    """Elementwise ``add`` or ``hadamard`` of two same-shape tensors."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise DimensionError(f"combine: shapes {x.shape} and {y.shape} differ")
    if kind == "add":
        return add(x, y)
    if kind == "hadamard":
        return mul(x, y)
    raise ValueError(f"unknown combine kind {kind!r}")


def log(x) -> Tensor:
    return Log.apply(x)


def exp(x) -> Tensor:
    return Exp.apply(x)


def relu(x) -> Tensor:
    return Relu.apply(x)


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x) -> Tensor:
    return Tanh.apply(x)


def prelu(x, slope, axis: int = 0) -> Tensor:
    return PRelu.apply(x, slope, axis=axis)


def activation(x, kind: str, slope=None, axis: int = 0) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "prelu":
        if slope is None:
            raise ValueError("prelu needs a slope tensor")
        return prelu(x, slope, axis=axis)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


class Reshape(Function):
    def forward(self, a, shape=()):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


def reshape(x, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


class Permute(Function):
    def forward(self, a, order=()):
        if sorted(order) != list(range(a.ndim)):
            raise DimensionError(f"permute order {order} invalid for rank {a.ndim}")
        self.inverse = tuple(np.argsort(order))
        return np.ascontiguousarray(np.transpose(a, order))

    def backward(self, grad):
        return (np.transpose(grad, self.inverse),)


def permute(x, order) -> Tensor:
    return Permute.apply(x, order=tuple(int(o) for o in order))


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    order = list(range(x.ndim))
    order[-1], order[-2] = order[-2], order[-1]
    return permute(x, order)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        ref = arrays[0]
        axis = axis % ref.ndim
        for a in arrays[1:]:
            if a.ndim != ref.ndim or any(
                a.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
            ):
                raise DimensionError(f"concat: {a.shape} incompatible with {ref.shape} on axis {axis}")
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return np.split(grad, self.splits, axis=self.axis)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        ax = axis if axis >= 0 else t.ndim + 1 + axis
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


class GetItem(Function):
    def forward(self, a, index=None):
        self.shape, self.index = a.shape, index
        out = a[index]
        return np.array(out, copy=True)

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=DTYPE)
        if _is_basic(self.index):
            full[self.index] = grad  # basic indexing never repeats an element
        else:
            np.add.at(full, self.index, grad)
        return (full,)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(
        (isinstance(i, (slice, int, np.integer)) and not isinstance(i, (bool, np.bool_))) or i is Ellipsis or i is None
        for i in items
    )


class Pad(Function):
    """Zero padding along one axis."""

    def forward(self, a, axis=-1, before=0, after=0):
        axis = axis % a.ndim
        widths = [(0, 0)] * a.ndim
        widths[axis] = (before, after)
        self.axis, self.before, self.n = axis, before, a.shape[axis]
        return np.pad(a, widths)

    def backward(self, grad):
        sl = [slice(None)] * grad.ndim
        sl[self.axis] = slice(self.before, self.before + self.n)
        return (grad[tuple(sl)],)


def pad(x, axis: int = -1, before: int = 0, after: int = 0) -> Tensor:
    return Pad.apply(x, axis=axis, before=before, after=after)


def flip(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(None, None, -1)
    return GetItem.apply(x, index=tuple(sl))


# ---------------------------------------------------------------------------
# linear algebra


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        da = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        db = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return da, db


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


class PointwiseLinear(Function):
    """``W @ x + b`` applied at every position of the other axes.

    ``axis`` names the feature axis of ``x``; it is replaced by ``W.shape[0]``.
    """

    def forward(self, x, w, b=None, axis=0):
        axis = axis % x.ndim
        if w.ndim != 2 or w.shape[1] != x.shape[axis]:
            raise DimensionError(f"pointwise_linear: W {w.shape} vs features {x.shape[axis]} of {x.shape}")
        if b is not None and b.shape != (w.shape[0],):
            raise DimensionError(f"pointwise_linear: bias {b.shape} vs {w.shape[0]} outputs")
        self.axis, self.has_bias = axis, b is not None
        xm = np.moveaxis(x, axis, -1)
        self.lead = xm.shape[:-1]
        # one contiguous 2-D GEMM beats a strided batched matmul
        self.x2, self.w = np.ascontiguousarray(xm).reshape(-1, xm.shape[-1]), w
        y = self.x2 @ w.T
        if b is not None:
            y += b
        return np.moveaxis(y.reshape(self.lead + (w.shape[0],)), -1, axis)

    def backward(self, grad):
        g2 = np.ascontiguousarray(np.moveaxis(grad, self.axis, -1)).reshape(-1, self.w.shape[0])
        dx = np.moveaxis((g2 @ self.w).reshape(self.lead + (self.w.shape[1],)), -1, self.axis)
        dw = g2.T @ self.x2
        if self.has_bias:
            return dx, dw, g2.sum(axis=0)
        return dx, dw


def pointwise_linear(x, w, b=None, axis: int = 0) -> Tensor:
    if b is None:
        return PointwiseLinear.apply(x, w, axis=axis)
    return PointwiseLinear.apply(x, w, b, axis=axis)


def linear(x, w, b=None) -> Tensor:
    """Projection over the trailing (feature) axis."""
    return pointwise_linear(x, w, b, axis=-1)


class Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - np.max(a, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - np.sum(grad * s, axis=self.axis, keepdims=True)),)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for rank {x.ndim}")
    return Softmax.apply(x, axis=axis)


# ---------------------------------------------------------------------------
# framing


class Frame(Function):
    """[..., T] -> [..., F, size] windows at ``hop``; F = (T - size) // hop + 1."""

    def forward(self, a, size=1, hop=1):
        T = a.shape[-1]
        if T < size:
            raise DimensionError(f"frame: length {T} shorter than window {size}")
        if hop < 1:
            raise DimensionError("frame: hop must be >= 1")
        n = (T - size) // hop + 1
        self.T, self.size, self.hop, self.n = T, size, hop, n
        view = np.lib.stride_tricks.sliding_window_view(a, size, axis=-1)
        return np.ascontiguousarray(view[..., : (n - 1) * hop + 1 : hop, :])

    def backward(self, grad):
        return (_overlap_sum(grad, self.hop, self.T),)


def _overlap_sum(frames: np.ndarray, hop: int, length: int) -> np.ndarray:
    n, size = frames.shape[-2], frames.shape[-1]
    out = np.zeros(frames.shape[:-2] + (max(length, (n - 1) * hop + size),), dtype=DTYPE)
    if size % hop == 0:
        # reshape trick: each hop-wide stripe of the window is a strided add
        k = size // hop
        for j in range(k):
            seg = frames[..., :, j * hop : (j + 1) * hop].reshape(frames.shape[:-2] + (n * hop,))
            out[..., j * hop : j * hop + n * hop] += seg
    else:
        for i in range(n):
            out[..., i * hop : i * hop + size] += frames[..., i, :]
    return out[..., :length]


def overlap_counts(n: int, size: int, hop: int, length: int) -> np.ndarray:
    ones = np.ones((n, size), dtype=DTYPE)
    return _overlap_sum(ones, hop, length)


class OverlapAdd(Function):
    """[..., F, size] -> [..., length]: sum windows at ``hop`` (optionally averaged)."""

    def forward(self, frames, hop=1, length=None, normalize=True):
        n, size = frames.shape[-2], frames.shape[-1]
        full = (n - 1) * hop + size
        length = full if length is None else length
        self.hop, self.size, self.n = hop, size, n
        out = _overlap_sum(frames, hop, length)
        self.scale = None
        if normalize:
            counts = overlap_counts(n, size, hop, length)
            counts[counts == 0] = 1.0
            self.scale = 1.0 / counts
            out = out * self.scale
        self.length = length
        return out

    def backward(self, grad):
        if self.scale is not None:
            grad = grad * self.scale
        full = (self.n - 1) * self.hop + self.size
        if grad.shape[-1] < full:
            grad = np.concatenate(
                [grad, np.zeros(grad.shape[:-1] + (full - grad.shape[-1],), dtype=DTYPE)], axis=-1
            )
        view = np.lib.stride_tricks.sliding_window_view(grad, self.size, axis=-1)
        return (np.ascontiguousarray(view[..., : (self.n - 1) * self.hop + 1 : self.hop, :]),)


def frame(x, size: int, hop: int) -> Tensor:
    return Frame.apply(x, size=size, hop=hop)


def overlap_add(frames, hop: int, length: int | None = None, normalize: bool = True) -> Tensor:
    return OverlapAdd.apply(frames, hop=hop, length=length, normalize=normalize)


def conv1d(x, kernels, stride: int) -> Tensor:
    """Valid strided correlation: [..., T] with [N, P] kernels -> [..., N, L]."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 2:
        raise DimensionError(f"conv1d kernels must be [N, P], got {kernels.shape}")
    P = kernels.shape[1]
    if x.shape[-1] < P:
        raise DimensionError(f"conv1d: input length {x.shape[-1]} < kernel size {P}")
    frames = frame(x, P, stride)  # [..., L, P]
    return pointwise_linear(frames, kernels, axis=-1).permute(
        tuple(range(x.ndim - 1)) + (x.ndim, x.ndim - 1)
    )


# ---------------------------------------------------------------------------
# verification


def numerical_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. the entries of ``x`` (in place perturbation)."""
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size, dtype=DTYPE)
    with no_grad():
        for i in idx:
            orig = flat[i]
            up, down = orig + h, orig - h
            flat[i] = up
            fp = f(x).item()
            flat[i] = down
            fm = f(x).item()
            flat[i] = orig
            out[i] = (fp - fm) / (up - down)  # the step actually taken, not 2h
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, indices=None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``indices`` optionally restricts the comparison to a subset of flat positions.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    numeric = numerical_grad(f, x, h, indices)
    err = relative_error(analytic, numeric).reshape(-1)
    if indices is not None:
        err = err[list(indices)]
    return float(err.max()) if err.size else 0.0
