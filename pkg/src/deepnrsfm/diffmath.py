"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the lifting network needs are provided. Every tensor
wraps an immutable ``numpy.ndarray``; leading axes are treated as batch
axes by the matrix operations, so one tape can carry a whole minibatch.

Usage::

    x = tensor(np.ones((3, 1)), requires_grad=True)
    with Tape() as tape:
        y = masked_frobenius(matmul(a, x), mask)
        loss = mean(y)
    (gx,) = tape.gradient(loss, [x])

Modules that need an operation with a hand-written derivative (block soft
thresholding, SVD projections) register it through :func:`custom_op`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

__all__ = [
    "Tensor", "Tape", "tensor", "custom_op", "checked_mode",
    "matmul", "add", "sub", "neg", "scale", "mul", "relu", "softplus",
    "reshape", "transpose", "row_select", "concat", "sum_all", "mean",
    "masked_frobenius", "kron_expand", "kron_apply_t",
    "numerical_gradient", "relative_error",
]

_CHECKED = False
_TAPES: list["Tape"] = []


@contextlib.contextmanager
def checked_mode(enabled: bool = True):
    """Reject non-finite data whenever a tensor is constructed."""
    global _CHECKED
    prev, _CHECKED = _CHECKED, enabled
    try:
        yield
    finally:
        _CHECKED = prev


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor data contains NaN or Inf")


class Tensor:
    """Immutable float64 array with a ``requires_grad`` flag."""

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        if _CHECKED:
            _check_finite(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr = arr.astype(np.float64) if arr.dtype != np.float64 else arr.view()
        arr.setflags(write=False)
        if _CHECKED:
            _check_finite(arr)
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64), False)


@dataclass
class Node:
    name: str
    output: Tensor
    inputs: tuple
    backward: Callable
    meta: dict = field(default_factory=dict)


class Tape:
    """Ordered record of executed operations.

    ``gradient`` may be called any number of times; it never mutates the
    recorded nodes, so repeated calls return identical arrays.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, node: Node):
        self.nodes.append(node)

    def find(self, name: str) -> list[Node]:
        return [n for n in self.nodes if n.name == name]

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        if seed is None:
            if target.data.size != 1:
                raise ShapeError("gradient of a non-scalar target needs an explicit seed")
            seed = np.ones_like(target.data)
        grads = {id(target): np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [np.array(grads[id(s)]) if id(s) in grads else np.zeros_like(s.data)
                for s in sources]


def custom_op(name: str, data: np.ndarray, inputs: Sequence, backward: Callable,
              meta: dict | None = None) -> Tensor:
    """Wrap ``data`` as the output of an op with a hand-written vector-Jacobian product.

    ``backward(g)`` receives the output gradient and returns one gradient
    (or ``None``) per input, in order.
    """
    inputs = tuple(_as_tensor(t) for t in inputs)
    rg = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.asarray(data), rg)
    if rg and _TAPES:
        _TAPES[-1].record(Node(name, out, inputs, backward, meta if meta is not None else {}))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(np.matmul(g, _swap(bd)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(_swap(ad), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return custom_op("matmul", out, (a, b), backward)


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return custom_op("add", a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return custom_op("sub", a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return custom_op("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return custom_op("scale", a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return custom_op("mul", ad * bd, (a, b), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return custom_op("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return custom_op("softplus", out, (a,), lambda g: (g * sig,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    return custom_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    """Swap the last two axes, or apply an explicit permutation."""
    a = _as_tensor(a)
    if axes is None:
        return custom_op("transpose", _swap(a.data), (a,), lambda g: (_swap(g),))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op("transpose", np.transpose(a.data, axes), (a,),
                     lambda g: (np.transpose(g, inv),))


def row_select(a, idx) -> Tensor:
    """Select rows (axis -2) by integer index array."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    src = a.shape

    def backward(g):
        out = np.zeros(src)
        np.add.at(out, (Ellipsis, idx, slice(None)), g)
        return (out,)

    return custom_op("row_select", a.data[..., idx, :], (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    shapes = [t.shape for t in ts]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(_unbroadcast(p, s) for p, s in zip(parts, shapes))

    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {shapes}") from exc
    return custom_op("concat", data, ts, backward)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return custom_op("sum", np.array(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, max(a.data.size, 1)
    return custom_op("mean", np.array(a.data.mean() if a.data.size else 0.0), (a,),
                     lambda g: (np.full(shape, float(g) / n),))


def masked_frobenius(residual, mask) -> Tensor:
    """Frobenius norm over the last two axes after zeroing masked rows.

    ``mask`` broadcasts against ``residual`` (typically shape ``(..., rows, 1)``).
    Returns one norm per leading index. The gradient at a zero residual is zero.
    """
    r = _as_tensor(residual)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    try:
        mr = m * r.data
    except ValueError as exc:
        raise ShapeError(f"mask {m.shape} does not broadcast to {r.shape}") from exc
    if mr.shape != r.shape:
        raise ShapeError(f"mask {m.shape} would enlarge residual {r.shape}")
    norm = np.sqrt(np.sum(mr * mr, axis=(-1, -2)))

    def backward(g):
        safe = np.where(norm > 0, norm, 1.0)
        coef = np.where(norm > 0, np.asarray(g) / safe, 0.0)
        return (coef[..., None, None] * m * mr,)

    return custom_op("masked_frobenius", norm, (r,), backward)


def kron_expand(d) -> Tensor:
    """Explicit ``d ⊗ I_3``."""
    d = _as_tensor(d)
    if d.ndim != 2:
        raise ShapeError("kron_expand expects a 2-D matrix")
    kp, k = d.shape
    out = np.kron(d.data, np.eye(3))

    def backward(g):
        return (np.einsum("icjc->ij", g.reshape(kp, 3, k, 3)),)

    return custom_op("kron_expand", out, (d,), backward)


def kron_apply_t(d, psi) -> Tensor:
    """``(d ⊗ I_3)^T psi`` without materialising the Kronecker product.

    ``psi`` has shape ``(..., 3*Kprev, a)``; the result is ``(..., 3*K, a)``.
    """
    d, psi = _as_tensor(d), _as_tensor(psi)
    kp, k = d.shape
    *lead, rows, a = psi.shape
    if rows != 3 * kp:
        raise ShapeError(f"block code has {rows} rows, expected {3 * kp}")
    blocks = reshape(psi, (*lead, kp, 3 * a))
    return reshape(matmul(transpose(d), blocks), (*lead, 3 * k, a))


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), floor))


def numerical_gradient(fn: Callable[..., float], arrays: Sequence[np.ndarray],
                       eps: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    arrays = [np.array(x, dtype=np.float64) for x in arrays]
    out = []
    for i, x in enumerate(arrays):
        g = np.zeros_like(x)
        flat, gflat = x.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = fn(*arrays)
            flat[j] = orig - eps
            fm = fn(*arrays)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2 * eps)
        out.append(g)
    return out
