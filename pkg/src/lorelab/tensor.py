"""Dense float32 tensors with a per-forward-pass reverse-mode tape.

A :class:`Tape` records every operation whose inputs include a watched
tensor. ``backward`` walks the recording once, in reverse, and returns the
gradient of a scalar root with respect to every watched leaf.

    tape = Tape()
    w = tape.watch(np.ones((4, 2)))
    loss = sum_(relu(x @ w))
    grads = backward(tape, loss)      # {node_id: ndarray}
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32
SOFTPLUS_THRESHOLD = 20.0


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: non-finite value produced")


class Tape:
    """Append-only record of operations for one forward pass."""

    def __init__(self):
        self.parents: list[tuple[int | None, ...]] = []
        self.vjps: list[Callable | None] = []
        self.shapes: list[tuple[int, ...]] = []
        self.consumed = False

    def __len__(self):
        return len(self.parents)

    def watch(self, value) -> "Tensor":
        """Register ``value`` as a differentiable leaf and return its tensor."""
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        data = value.data if isinstance(value, Tensor) else value
        data = np.array(data, dtype=DTYPE)
        _check_finite(data, "watch")
        node_id = self._append((), None, data.shape)
        return Tensor._wrap(data, self, node_id)

    def _append(self, parents, vjp, shape) -> int:
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.shapes.append(shape)
        return len(self.parents) - 1

    def leaves(self) -> list[int]:
        return [i for i, v in enumerate(self.vjps) if v is None]

    def gradient(self, root: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
        grads = backward(self, root)
        return [grads[t.node_id] for t in wrt]


class Tensor:
    """Float32 array, optionally attached to a tape."""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100

    def __init__(self, data):
        self.data = np.array(data, dtype=DTYPE)
        _check_finite(self.data, "tensor")
        self.tape = None
        self.node_id = None

    @classmethod
    def _wrap(cls, data, tape, node_id):
        t = cls.__new__(cls)
        t.data = data
        t.tape = tape
        t.node_id = node_id
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    with np.errstate(over="ignore"):  # overflow to inf is reported by the finiteness check
        value = np.asarray(value, dtype=DTYPE)
    _check_finite(value, op)
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError(f"{op}: operands recorded on different tapes")
    if tape is None:
        return Tensor._wrap(value, None, None)
    if tape.consumed:
        raise TapeError(f"{op}: tape already consumed by backward")
    parents = tuple(t.node_id if t.tape is tape else None for t in inputs)
    node_id = tape._append(parents, vjp, value.shape)
    return Tensor._wrap(value, tape, node_id)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(shape) if n == 1 and grad.shape[i + extra] != 1
    )
    out = grad.sum(axis=axes, dtype=np.float64, keepdims=True)
    return out.reshape(shape).astype(DTYPE)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NonFiniteError("div: division by zero")
    out = ad / bd
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(DTYPE)


def softplus(a) -> Tensor:
    """log(1 + e^z), returning z itself past the overflow threshold."""
    a = as_tensor(a)
    z = a.data
    big = z > SOFTPLUS_THRESHOLD
    safe = np.where(big, 0, z)
    out = np.where(big, z, np.log1p(np.exp(safe)))
    slope = _sigmoid(z)
    return _record(out, (a,), lambda g: (g * slope,), "softplus")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive argument")
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("sqrt: non-positive argument")
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g / (2 * out),), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).astype(DTYPE)


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims)
    return _record(out, (a,), lambda g: (_expand(g, shape, axis, keepdims),), "sum")


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]
    if n == 0:
        raise ShapeError("mean: empty reduction")
    out = a.data.mean(axis=axis, dtype=np.float64, keepdims=keepdims)
    return _record(out, (a,), lambda g: (_expand(g / DTYPE(n), shape, axis, keepdims),), "mean")


def sq_norm(a, axis: int = -1) -> Tensor:
    """Squared l2 norm along ``axis`` (row-wise for a batch)."""
    a = as_tensor(a)
    ad = a.data
    out = np.sum(np.square(ad, dtype=np.float64), axis=axis)
    return _record(out, (a,), lambda g: (2 * np.expand_dims(g, axis) * ad,), "sq_norm")


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expected equal 1-d shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = np.dot(ad.astype(np.float64), bd.astype(np.float64))
    return _record(out, (a, b), lambda g: (g * bd, g * ad), "dot")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {a.shape}")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def vjp(g):
        return ((g - p * g.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(DTYPE),)

    return _record(out, (a,), vjp, "log_softmax")


def pick(a, index) -> Tensor:
    """Row-wise gather ``a[i, index[i]]`` for a 2-d tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick: bad shapes {a.shape} and {index.shape}")
    if np.any(index < 0) or np.any(index >= a.shape[1]):
        raise IndexError("pick: index out of range")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[rows, index] = g
        return (out,)

    return _record(a.data[rows, index], (a,), vjp, "pick")


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Gradient of scalar ``root`` w.r.t. every leaf watched on ``tape``.

    Leaves the root does not depend on get zero gradients. The tape can be
    walked once; a second call raises :class:`TapeError`.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by backward")
    if root.data.size != 1 or root.data.ndim != 0:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {}
    if root.tape is tape:
        grads[root.node_id] = np.ones((), dtype=DTYPE)
        for node in range(root.node_id, -1, -1):
            g = grads.get(node)
            vjp = tape.vjps[node]
            if g is None or vjp is None:
                continue
            del grads[node]
            for parent, pg in zip(tape.parents[node], vjp(g)):
                if parent is None or pg is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
    out = {}
    for leaf in tape.leaves():
        g = grads.get(leaf)
        if g is None:
            g = np.zeros(tape.shapes[leaf], dtype=DTYPE)
        out[leaf] = np.asarray(g, dtype=DTYPE).reshape(tape.shapes[leaf])
    return out


def grad(f: Callable[..., Tensor], *points) -> list[np.ndarray]:
    """Gradient of scalar ``f(*points)`` w.r.t. each point, on a fresh tape."""
    tape = Tape()
    watched = [tape.watch(p) for p in points]
    return tape.gradient(f(*watched), watched)


def finite_diff_check(f: Callable[..., Tensor], point, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``point`` is an array or a sequence of arrays; ``f`` receives one tensor
    per array. The error per coordinate is
    ``|analytic - fd| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    single = isinstance(point, (np.ndarray, Tensor)) or np.isscalar(point)
    points = [point] if single else list(point)
    points = [np.array(p.data if isinstance(p, Tensor) else p, dtype=DTYPE) for p in points]
    analytic = grad(f, *points)

    def evaluate(args) -> float:
        value = float(f(*[Tensor(a) for a in args]).data)
        if not np.isfinite(value):
            raise NonFiniteError("finite_diff_check: non-finite evaluation")
        return value

    worst = 0.0
    for k, p in enumerate(points):
        for idx in np.ndindex(p.shape):
            args = [q.copy() for q in points]
            hi = p[idx] + DTYPE(h)
            lo = p[idx] - DTYPE(h)
            args[k][idx] = hi
            up = evaluate(args)
            args[k][idx] = lo
            down = evaluate(args)
            # divide by the step actually taken after float32 rounding
            fd = (up - down) / (float(hi) - float(lo))
            a = float(analytic[k][idx])
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
