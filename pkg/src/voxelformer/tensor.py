"""Dense tensor type with reverse-mode differentiation.

Tensors wrap contiguous numpy float arrays (float32 for training, float64 for
gradient checking) and record a tape of parent links plus backward closures.
``backward()`` on a scalar walks the tape once in reverse topological order.
Tensors are never mutated by ops; only optimizers touch Parameter data, and
only gradient accumulation touches ``.grad``.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (eval / finite differences)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if grad.shape[axis] != extent:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accum(t: "Tensor", grad: np.ndarray) -> None:
    # No copies: closures may hand the same array object to several parents,
    # so shared grads are only ever rebound (grad + g allocates). In-place
    # accumulation is reserved for Parameters, whose zero-initialized buffer
    # is private by construction.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = grad
    elif isinstance(t, Parameter):
        t.grad += grad
    else:
        t.grad = t.grad + grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: Iterable["Tensor"] = (), _backward=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = tuple(_parents) if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    # -- autodiff ----------------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` of every reachable tensor; ``self`` must be scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")

        # iterative topological sort: deep training graphs overflow recursion
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        _accum(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None  # intermediate grads are consumed; free eagerly

    # -- construction helpers ----------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype))

    @staticmethod
    def full(shape, value, dtype=np.float32) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=dtype))

    # -- elementwise arithmetic ----------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        rg = self.requires_grad or other.requires_grad
        out = Tensor(self.data + other.data, rg, (self, other))
        if rg:
            def bw(g):
                _accum(self, _unbroadcast(g, self.data.shape))
                _accum(other, _unbroadcast(g, other.data.shape))
            out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, self.requires_grad, (self,))
        if out.requires_grad:
            out._backward = lambda g: _accum(self, -g)
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        rg = self.requires_grad or other.requires_grad
        out = Tensor(self.data * other.data, rg, (self, other))
        if rg:
            def bw(g):
                _accum(self, _unbroadcast(g * other.data, self.data.shape))
                _accum(other, _unbroadcast(g * self.data, other.data.shape))
            out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        return self * other.pow(-1.0)

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) * self.pow(-1.0)

    def pow(self, exponent: float) -> "Tensor":
        """Elementwise power with a constant exponent."""
        out = Tensor(self.data ** exponent, self.requires_grad, (self,))
        if out.requires_grad:
            def bw(g):
                _accum(self, g * (exponent * self.data ** (exponent - 1.0)))
            out._backward = bw
        return out

    __pow__ = pow

    def sqrt(self) -> "Tensor":
        return self.pow(0.5)

    def exp(self) -> "Tensor":
        out = Tensor(np.exp(self.data), self.requires_grad, (self,))
        if out.requires_grad:
            out._backward = lambda g: _accum(self, g * out.data)
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), self.requires_grad, (self,))
        if out.requires_grad:
            out._backward = lambda g: _accum(self, g / self.data)
        return out

    def sigmoid(self) -> "Tensor":
        # exp may overflow for very negative inputs; 1/(1+inf) == 0 is exact
        with np.errstate(over="ignore"):
            s = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor(s, self.requires_grad, (self,))
        if out.requires_grad:
            out._backward = lambda g: _accum(self, g * (out.data * (1.0 - out.data)))
        return out

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0), self.requires_grad, (self,))
        if out.requires_grad:
            def bw(g):
                _accum(self, g * (self.data > 0))
            out._backward = bw
        return out

    # -- matmul ----------------------------------------------------------------

    def __matmul__(self, other: "Tensor") -> "Tensor":
        other = self._coerce(other)
        if self.data.shape[-1] != other.data.shape[-2 if other.data.ndim > 1 else 0]:
            raise ValueError(
                f"matmul dimension mismatch: {self.shape} @ {other.shape}")
        rg = self.requires_grad or other.requires_grad
        out = Tensor(np.matmul(self.data, other.data), rg, (self, other))
        if rg:
            def bw(g):
                if self.requires_grad:
                    ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
                    _accum(self, _unbroadcast(ga, self.data.shape))
                if other.requires_grad:
                    gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
                    _accum(other, _unbroadcast(gb, other.data.shape))
            out._backward = bw
        return out

    # -- reductions --------------------------------------------------------------

    def sum(self, axis: Union[int, Tuple[int, ...], None] = None,
            keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                     self.requires_grad, (self,))
        if out.requires_grad:
            in_shape = self.data.shape

            def bw(g):
                if axis is None:
                    _accum(self, np.broadcast_to(g, in_shape))
                    return
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                if not keepdims:
                    for ax in sorted(a % len(in_shape) for a in axes):
                        g = np.expand_dims(g, ax)
                _accum(self, np.broadcast_to(g, in_shape))
            out._backward = bw
        return out

    def mean(self, axis: Union[int, Tuple[int, ...], None] = None,
             keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = 1
            for ax in axes:
                count *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape surgery --------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), self.requires_grad, (self,))
        if out.requires_grad:
            out._backward = lambda g: _accum(self, g.reshape(self.data.shape))
        return out

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out = Tensor(self.data.transpose(axes), self.requires_grad, (self,))
        if out.requires_grad:
            inverse = tuple(np.argsort(axes))
            out._backward = lambda g: _accum(self, g.transpose(inverse))
        return out

    def __getitem__(self, index) -> "Tensor":
        out = Tensor(self.data[index], self.requires_grad, (self,))
        if out.requires_grad:
            def bw(g):
                full = np.zeros_like(self.data)
                np.add.at(full, index, g)
                _accum(self, full)
            out._backward = bw
        return out


class Parameter(Tensor):
    """Trainable tensor; ``grad`` is allocated up front and accumulated into."""

    __slots__ = ("name",)

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name


# -- structural ops used across the network ---------------------------------


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    rg = any(t.requires_grad for t in tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), rg, tuple(tensors))
    if rg:
        sizes = [t.data.shape[axis] for t in tensors]

        def bw(g):
            start = 0
            index = [slice(None)] * g.ndim
            for t, extent in zip(tensors, sizes):
                index[axis] = slice(start, start + extent)
                _accum(t, g[tuple(index)])
                start += extent
        out._backward = bw
    return out


def pad(x: Tensor, pad_width: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; ``pad_width`` is a (before, after) pair per axis."""
    pw = [tuple(p) for p in pad_width]
    out = Tensor(np.pad(x.data, pw), x.requires_grad, (x,))
    if out.requires_grad:
        index = tuple(slice(before, before + extent)
                      for (before, _), extent in zip(pw, x.data.shape))
        out._backward = lambda g: _accum(x, g[index])
    return out


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Toroidal roll; positive shift moves values toward higher indices."""
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(axes)
    out = Tensor(np.roll(x.data, shifts, axes), x.requires_grad, (x,))
    if out.requires_grad:
        inverse = tuple(-s for s in shifts)
        out._backward = lambda g: _accum(x, np.roll(g, inverse, axes))
    return out


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table by a flat integer index (bias-table lookup)."""
    index = np.asarray(index)
    out = Tensor(table.data[index], table.requires_grad, (table,))
    if out.requires_grad:
        def bw(g):
            full = np.zeros_like(table.data)
            np.add.at(full, index, g)
            _accum(table, full)
        out._backward = bw
    return out
