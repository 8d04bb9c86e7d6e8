"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is built dynamically: every operation returns a new Tensor that
remembers its inputs and a closure propagating the upstream gradient.
Gradients accumulate additively into leaf Parameters; callers zero them
explicitly between steps. All reductions are plain sequential numpy
reductions, so identical inputs give bit-identical results.
"""

from __future__ import annotations

import numpy as np

_DTYPE = np.float64
_CHECK_FINITE = True

_PRECISIONS = {
    "test": np.float64,
    "train": np.float32,
    "float64": np.float64,
    "float32": np.float32,
}


def set_precision(mode: str) -> None:
    """Set the global dtype: 'test'/'float64' or 'train'/'float32'."""
    global _DTYPE
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision mode {mode!r}")
    _DTYPE = _PRECISIONS[mode]


def default_dtype():
    return _DTYPE


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check(data: np.ndarray) -> np.ndarray:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced in computation graph")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense array node in the computation graph."""

    __slots__ = ("data", "grad", "_backward", "_prev", "requires_grad", "name")

    def __init__(self, data, prev=(), requires_grad=False, name=None):
        self.data = _check(np.asarray(data, dtype=_DTYPE))
        self.grad = None
        self._backward = None
        self._prev = prev
        self.requires_grad = requires_grad
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def const(data) -> "Tensor":
        return Tensor(data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # -- graph plumbing -------------------------------------------------------

    def _make(self, data, prev, backward) -> "Tensor":
        out = Tensor(data, prev=prev)
        out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar output into every reachable node."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar output, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g, a.data.shape))
            b._accumulate(_unbroadcast(g, b.data.shape))

        return self._make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return self._make(-a.data, (a,), lambda g: a._accumulate(-g))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return self._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return self._make(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        a = self

        def backward(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1))

        return self._make(a.data**exponent, (a,), backward)

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self, self._coerce(other)
        if a.data.shape[-1] != b.data.shape[0]:
            raise ShapeError(
                f"matmul mismatch: {a.data.shape} @ {b.data.shape}"
            )

        def backward(g):
            a._accumulate(g @ b.data.T)
            b._accumulate(a.data.T @ g)

        return self._make(a.data @ b.data, (a, b), backward)

    __matmul__ = matmul

    # -- nonlinearities -------------------------------------------------------

    def relu(self):
        a = self
        mask = a.data > 0
        return self._make(a.data * mask, (a,), lambda g: a._accumulate(g * mask))

    def tanh(self):
        a = self
        y = np.tanh(a.data)
        return self._make(y, (a,), lambda g: a._accumulate(g * (1.0 - y * y)))

    def sigmoid(self):
        a = self
        # exp may overflow to inf for very negative inputs; the quotient
        # still lands on the correct saturated value of 0
        with np.errstate(over="ignore"):
            y = 1.0 / (1.0 + np.exp(-a.data))
        return self._make(y, (a,), lambda g: a._accumulate(g * y * (1.0 - y)))

    def exp(self):
        a = self
        y = np.exp(a.data)
        return self._make(y, (a,), lambda g: a._accumulate(g * y))

    def log(self):
        a = self
        return self._make(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))

    def sqrt(self):
        a = self
        y = np.sqrt(a.data)

        def backward(g):
            a._accumulate(g * 0.5 / y)

        return self._make(y, (a,), backward)

    def abs(self):
        a = self
        s = np.sign(a.data)
        return self._make(np.abs(a.data), (a,), lambda g: a._accumulate(g * s))

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient passes only where unclipped."""
        a = self
        mask = (a.data >= lo) & (a.data <= hi)
        return self._make(
            np.clip(a.data, lo, hi), (a,), lambda g: a._accumulate(g * mask)
        )

    # -- reductions and shape ops --------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())

        return self._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self._make(
            a.data.reshape(shape), (a,),
            lambda g: a._accumulate(g.reshape(a.data.shape)),
        )

    def __getitem__(self, key):
        a = self

        def backward(g):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, key, g)

        return self._make(a.data[key], (a,), backward)


class Parameter(Tensor):
    """A named trainable leaf tensor with an always-allocated gradient."""

    __slots__ = ("trainable",)

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable

    def zero_grad(self):
        self.grad[...] = 0.0


def zero_grads(params) -> None:
    """Zero the gradient buffers of an iterable or mapping of Parameters."""
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        p.zero_grad()


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate tensors along an axis; gradient splits back."""
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    out = Tensor(data, prev=tuple(tensors))
    out._backward = backward
    return out


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup table[indices]; backward scatter-adds (rows may repeat)."""
    indices = np.asarray(indices)

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, indices, g)

    out = Tensor(table.data[indices], prev=(table,))
    out._backward = backward
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with a broadcast bias row."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"affine mismatch: input {x.data.shape} vs weight {w.data.shape}"
        )
    return x.matmul(w) + b
