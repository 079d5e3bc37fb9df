"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are built on the fly (define-by-run). Every operation returns a new
:class:`Tensor` that remembers its inputs and a closure applying the local
gradient rule; :meth:`Tensor.backward` replays those closures in reverse
topological order.

Broadcasting is deliberately narrow: a binary op accepts operands of equal
shape, a scalar against anything, or a row vector ``(n,)`` / ``(1, n)``
against a tensor whose last axis is ``n``. Anything else must go through
:meth:`Tensor.expand` explicitly.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "concat",
    "grad_check",
    "matmul",
    "softmax",
    "log_softmax",
    "l2_norm",
    "sq_euclidean",
]


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _row_broadcastable(small: tuple, big: tuple) -> bool:
    if len(big) < 2:
        return False
    n = big[-1]
    return small == (n,) or small == (1, n)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    if len(shape) == 0 or math.prod(shape) == 1:
        return np.sum(grad).reshape(shape)
    # row-vector broadcast: sum over every leading axis
    return grad.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


class Tensor:
    """n-dimensional float64 array that records how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op

    # -- basic protocol -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph plumbing -------------------------------------------------

    def _make(self, data: np.ndarray, parents: tuple, op: str, backward) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
        if needs:
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad = self.grad + g

    def tape(self) -> list["Tensor"]:
        """Nodes reachable from ``self`` in topological order (inputs first)."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        if self.data.size != 1 or self.ndim > 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        order = self.tape()
        # intermediate gradients are dropped once consumed; leaves keep theirs
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node is not self:
                    node.grad = None

    # -- elementwise binary ops ---------------------------------------

    @staticmethod
    def _lift(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def _binary_check(self, other: "Tensor", name: str) -> None:
        a, b = self.shape, other.shape
        if a == b:
            return
        if (other.size == 1 and len(b) <= len(a)) or (self.size == 1 and len(a) <= len(b)):
            return
        if _row_broadcastable(a, b) or _row_broadcastable(b, a):
            return
        raise ShapeError(f"{name}: cannot combine shapes {a} and {b}; use expand() for explicit broadcasting")

    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        self._binary_check(other, "add")
        a, b = self, other

        def backward(g):
            a._accumulate(_reduce_to(g, a.shape))
            b._accumulate(_reduce_to(g, b.shape))

        return self._make(a.data + b.data, (a, b), "add", backward)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._lift(other)
        self._binary_check(other, "sub")
        a, b = self, other

        def backward(g):
            a._accumulate(_reduce_to(g, a.shape))
            b._accumulate(_reduce_to(-g, b.shape))

        return self._make(a.data - b.data, (a, b), "sub", backward)

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        self._binary_check(other, "mul")
        a, b = self, other

        def backward(g):
            a._accumulate(_reduce_to(g * b.data, a.shape))
            b._accumulate(_reduce_to(g * a.data, b.shape))

        return self._make(a.data * b.data, (a, b), "mul", backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._lift(other)
        self._binary_check(other, "div")
        a, b = self, other

        def backward(g):
            a._accumulate(_reduce_to(g / b.data, a.shape))
            b._accumulate(_reduce_to(-g * a.data / (b.data * b.data), b.shape))

        return self._make(a.data / b.data, (a, b), "div", backward)

    def __rtruediv__(self, other) -> "Tensor":
        return self._lift(other) / self

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(-g)

        return self._make(-a.data, (a,), "neg", backward)

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise ContractError("only constant exponents are supported")
        a, p = self, float(exponent)

        def backward(g):
            a._accumulate(g * p * a.data ** (p - 1.0))

        return self._make(a.data**p, (a,), f"pow{p:g}", backward)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- elementwise unary ops ----------------------------------------

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def backward(g):
            a._accumulate(g * out_data)

        return self._make(out_data, (a,), "exp", backward)

    def log(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = np.log(a.data)
        return self._make(out_data, (a,), "log", backward)

    def sqrt(self) -> "Tensor":
        a = self
        out_data = np.sqrt(a.data)

        def backward(g):
            a._accumulate(g * 0.5 / out_data)

        return self._make(out_data, (a,), "sqrt", backward)

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0

        def backward(g):
            a._accumulate(g * mask)

        return self._make(np.where(mask, a.data, 0.0), (a,), "relu", backward)

    hinge = relu

    def tanh(self) -> "Tensor":
        a = self
        out_data = np.tanh(a.data)

        def backward(g):
            a._accumulate(g * (1.0 - out_data * out_data))

        return self._make(out_data, (a,), "tanh", backward)

    def clamp(self, lo: float | None = None, hi: float | None = None) -> "Tensor":
        """Clip values; the gradient passes only where no clipping happened."""
        a = self
        out_data = np.clip(a.data, lo, hi)
        inside = out_data == a.data

        def backward(g):
            a._accumulate(g * inside)

        return self._make(out_data, (a,), "clamp", backward)

    # -- reductions -----------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.shape))

        return self._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum", backward)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        if n == 0:
            raise ContractError("mean of an empty tensor")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def backward(g):
            a._accumulate(g.reshape(a.shape))

        return self._make(a.data.reshape(shape), (a,), "reshape", backward)

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError(f"transpose needs a matrix, got shape {self.shape}")
        a = self

        def backward(g):
            a._accumulate(g.T)

        return self._make(a.data.T, (a,), "transpose", backward)

    def expand(self, *shape) -> "Tensor":
        """Explicit broadcast of size-1 axes to ``shape``."""
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        if len(shape) != self.ndim:
            raise ShapeError(f"expand: rank mismatch between {self.shape} and {shape}")
        axes = []
        for i, (have, want) in enumerate(zip(self.shape, shape)):
            if have != want:
                if have != 1:
                    raise ShapeError(f"expand: cannot expand {self.shape} to {shape}")
                axes.append(i)
        a = self
        axes_t = tuple(axes)

        def backward(g):
            a._accumulate(np.sum(g, axis=axes_t, keepdims=True))

        return self._make(np.broadcast_to(a.data, shape).copy(), (a,), "expand", backward)

    def gather_rows(self, index) -> "Tensor":
        """Rows ``self[index]``; repeated indices accumulate gradient."""
        idx = np.asarray(index, dtype=np.int64)
        n = self.shape[0]
        if idx.size and (idx.min() < -n or idx.max() >= n):
            raise ShapeError(f"gather_rows: index out of range for {n} rows")
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

        return self._make(a.data[idx], (a,), "gather", backward)

    def pick(self, index) -> "Tensor":
        """One element per row of a matrix: ``out[i] = self[i, index[i]]``."""
        if self.ndim != 2:
            raise ShapeError(f"pick needs a matrix, got shape {self.shape}")
        idx = np.asarray(index, dtype=np.int64)
        if idx.shape != (self.shape[0],):
            raise ShapeError(f"pick: index shape {idx.shape} does not match {self.shape[0]} rows")
        rows = np.arange(self.shape[0])
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            full[rows, idx] = g
            a._accumulate(full)

        return self._make(a.data[rows, idx], (a,), "pick", backward)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(_as_array(data), requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = Tensor._lift(a), Tensor._lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return a._make(a.data @ b.data, (a, b), "matmul", backward)


def _check_finite(x: Tensor, name: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"{name}: input contains NaN or infinity")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x, "softmax")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(out_data * (g - np.sum(g * out_data, axis=axis, keepdims=True)))

    return x._make(out_data, (x,), "softmax", backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x, "log_softmax")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def backward(g):
        x._accumulate(g - probs * np.sum(g, axis=axis, keepdims=True))

    return x._make(out_data, (x,), "log_softmax", backward)


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return (x * x).sum(axis=axis, keepdims=keepdims).sqrt()


def sq_euclidean(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    diff = a - b
    return (diff * diff).sum(axis=axis)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of nothing")
    sizes = [t.shape[axis] for t in tensors]
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return tensors[0]._make(out_data, tuple(tensors), "concat", backward)


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Iterable[Tensor],
    h: float = 1e-5,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` is called with the tensor(s) in ``x`` as positional arguments and
    must return a scalar. The per-coordinate error is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"step h={h} outside [1e-7, 1e-3]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None

    out = f(*xs)
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: f returned a non-finite value")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    def evaluate() -> float:
        val = f(*xs).item()
        if not math.isfinite(val):
            raise NumericError("grad_check: f returned a non-finite value")
        return val

    worst = 0.0
    for t, ana in zip(xs, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(ana_flat[i] - numeric) / max(1.0, abs(ana_flat[i]))
            worst = max(worst, err)
    for t in xs:
        t.grad = None
    return worst
