"""Dense tensors with reverse-mode differentiation.

Every differentiable value in the package is a :class:`Tensor`.  Operations
record a backward closure on their output; :func:`backward` walks the recorded
graph in reverse topological order (the tape) and accumulates gradients into
every reachable tensor that requires them.  After a backward pass the graph
is released, so a second call on the same loss raises.

Data is float32 unless a tensor is created with ``dtype=np.float64``; that
float64 shadow mode is used by gradient checks.  Dtypes propagate through
operations and constants adopt the dtype of the tensor they meet.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

EPS = 1e-7

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def _as_array(value, dtype=None) -> np.ndarray:
    return np.ascontiguousarray(value, dtype=np.float32 if dtype is None else dtype)


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_released", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_array(data.data if isinstance(data, Tensor) else data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._released = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
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
        return scale(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    """Wrap a constant; constants combined with ``like`` adopt its dtype."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype if like is not None else None)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._released = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch between {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bw)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Plain quotient; callers add an epsilon to denominators that can vanish."""
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), bw)


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    f = a.dtype.type(factor)
    return _result(a.data * f, (a,), lambda g: (g * f,))


def abs_(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def power(a: ArrayLike, exponent: float, guard: bool = True) -> Tensor:
    """``a ** exponent`` for a scalar exponent.

    Non-integer exponents need a non-negative base; with ``guard`` the base is
    offset by ``EPS`` so the derivative stays finite at zero.
    """
    a = as_tensor(a)
    p = float(exponent)
    base = a.data
    if p != int(p):
        if np.any(base < 0):
            raise ValueError("power: negative base with non-integer exponent")
        if guard:
            base = base + a.dtype.type(EPS)
    out = base ** a.dtype.type(p)

    def bw(g):
        return (g * a.dtype.type(p) * base ** a.dtype.type(p - 1.0),)

    return _result(out, (a,), bw)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike, guard: bool = True) -> Tensor:
    """Natural log; with ``guard`` computes ``log(a + EPS)``, otherwise rejects a <= 0."""
    a = as_tensor(a)
    if guard:
        if np.any(a.data < 0):
            raise ValueError("log: negative input")
        base = a.data + a.dtype.type(EPS)
    else:
        if np.any(a.data <= 0):
            raise ValueError("log: non-positive input with guard disabled")
        base = a.data
    return _result(np.log(base), (a,), lambda g: (g / base,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    # np.maximum rather than np.where: the latter is several times slower on random masks
    return _result(np.maximum(a.data, a.dtype.type(0)), (a,), lambda g: (g * pos,))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # exp(-|x|) never overflows; negative inputs take ex / (1 + ex) instead of 1 / (1 + ex)
    ex = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + ex)
    out = (r * (1.0 + (x < 0) * (ex - 1.0))).astype(x.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def clamp_min(a: ArrayLike, lower: float) -> Tensor:
    """max(a, lower); gradient is blocked where the clamp is active."""
    a = as_tensor(a)
    keep = a.data > lower
    out = np.maximum(a.data, a.dtype.type(lower))
    return _result(out, (a,), lambda g: (g * keep,))


_UNARY = {"abs": abs_, "exp": exp, "log": log, "relu": relu, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: ArrayLike, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, abs, pow, exp, log, relu, sigmoid."""
    if kind in _BINARY:
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, b)
    if kind == "pow":
        return power(a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _expand_grad(g: np.ndarray, shape, axes, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ValueError("sum over an empty axis")
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims), dtype=a.dtype)
    return _result(out, (a,), lambda g: (_expand_grad(g, shape, axes, keepdims),))


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ValueError("mean over an empty axis")
    shape = a.shape
    inv = a.dtype.type(1.0 / count)
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims), dtype=a.dtype)
    return _result(out, (a,), lambda g: (_expand_grad(g * inv, shape, axes, keepdims),))


def min_(a: ArrayLike, axis: int, keepdims: bool = False) -> Tensor:
    """Minimum along one axis; the gradient goes to the first argmin."""
    a = as_tensor(a)
    (ax,) = _norm_axes(axis, a.ndim)
    if a.shape[ax] == 0:
        raise ValueError("min over an empty axis")
    idx = np.expand_dims(np.argmin(a.data, axis=ax), ax)
    out = a.data.min(axis=ax, keepdims=True)
    shape = a.shape

    def bw(g):
        gz = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gz, idx, g if keepdims else np.expand_dims(g, ax), axis=ax)
        return (gz,)

    return _result(out if keepdims else np.squeeze(out, ax), (a,), bw)


def reduce(kind: str, a: ArrayLike, axes=None, keepdims: bool = False) -> Tensor:
    if kind == "sum":
        return sum_(a, axes, keepdims)
    if kind == "mean":
        return mean(a, axes, keepdims)
    if kind == "min":
        if axes is None or (not isinstance(axes, int) and len(axes) != 1):
            raise ValueError("min reduction needs exactly one axis")
        return min_(a, axes if isinstance(axes, int) else axes[0], keepdims)
    raise ValueError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: ArrayLike, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(index)
    out = a.data[index]
    out = np.ascontiguousarray(out) if isinstance(out, np.ndarray) else np.asarray(out, dtype=a.dtype)

    def bw(g):
        gz = np.zeros(shape, dtype=g.dtype)
        if basic:
            gz[index] = g
        else:
            np.add.at(gz, index, g)
        return (gz,)

    return _result(out, (a,), bw)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty list")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _result(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return _result(out, tuple(ts), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every reachable ``x`` that requires grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise RuntimeError("backward already ran on this graph; re-run the forward pass")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    pending = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._released = True
