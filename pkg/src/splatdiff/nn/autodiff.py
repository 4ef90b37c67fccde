"""Minimal reverse-mode autodiff over numpy arrays.

Tensors record the ops that produced them; `backward()` on a scalar loss
topologically sorts the recorded DAG and runs each op's vector-Jacobian
closure in reverse. Dtypes follow numpy promotion, so a graph built from
float64 leaves stays float64 (gradient checks rely on this).
"""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import InvalidInputError

_GRAD_MODE = [True]


def _grad_enabled() -> bool:
    return _GRAD_MODE[-1]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / frozen branches)."""
    _GRAD_MODE.append(False)
    try:
        yield
    finally:
        _GRAD_MODE.pop()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=()):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.grad = None
        self._backward = None
        if parents and _grad_enabled() and any(p.requires_grad for p in parents):
            self._parents = tuple(parents)
            self.requires_grad = True
        else:
            self._parents = ()
            self.requires_grad = requires_grad

    # -- graph plumbing ----------------------------------------------------

    def accumulate(self, g):
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise InvalidInputError("backward() requires a scalar loss")
        # iterative postorder with cycle detection (graph must be a DAG)
        topo: list[Tensor] = []
        state: dict[int, int] = {}
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            nid = id(node)
            if expanded:
                state[nid] = 2
                topo.append(node)
                continue
            st = state.get(nid, 0)
            if st == 2:
                continue
            if st == 1:
                raise InvalidInputError("cycle detected in recorded graph")
            state[nid] = 1
            stack.append((node, True))
            for p in node._parents:
                if state.get(id(p), 0) == 0:
                    stack.append((p, False))
                elif state.get(id(p)) == 1:
                    raise InvalidInputError("cycle detected in recorded graph")
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- shape info ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = _ensure(other)
        out = Tensor(self.data + other.data, parents=(self, other))
        if out._parents:
            def backward():
                self.accumulate(_unbroadcast(out.grad, self.data.shape))
                other.accumulate(_unbroadcast(out.grad, other.data.shape))
            out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))
        if out._parents:
            out._backward = lambda: self.accumulate(-out.grad)
        return out

    def __sub__(self, other):
        return self + (-_ensure(other))

    def __rsub__(self, other):
        return _ensure(other) + (-self)

    def __mul__(self, other):
        other = _ensure(other)
        out = Tensor(self.data * other.data, parents=(self, other))
        if out._parents:
            def backward():
                self.accumulate(_unbroadcast(out.grad * other.data, self.data.shape))
                other.accumulate(_unbroadcast(out.grad * self.data, other.data.shape))
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _ensure(other)
        out = Tensor(self.data / other.data, parents=(self, other))
        if out._parents:
            def backward():
                self.accumulate(_unbroadcast(out.grad / other.data, self.data.shape))
                other.accumulate(_unbroadcast(-out.grad * self.data / other.data**2, other.data.shape))
            out._backward = backward
        return out

    def __rtruediv__(self, other):
        return _ensure(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise InvalidInputError("pow supports scalar exponents only")
        out = Tensor(self.data**exponent, parents=(self,))
        if out._parents:
            out._backward = lambda: self.accumulate(out.grad * exponent * self.data ** (exponent - 1))
        return out

    def __matmul__(self, other):
        other = _ensure(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise InvalidInputError("matmul supports 2D operands only")
        out = Tensor(self.data @ other.data, parents=(self, other))
        if out._parents:
            def backward():
                self.accumulate(out.grad @ other.data.T)
                other.accumulate(self.data.T @ out.grad)
            out._backward = backward
        return out

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data), parents=(self,))
        if out._parents:
            out._backward = lambda: self.accumulate(out.grad * out.data)
        return out

    def log(self):
        out = Tensor(np.log(self.data), parents=(self,))
        if out._parents:
            out._backward = lambda: self.accumulate(out.grad / self.data)
        return out

    def sqrt(self):
        out = Tensor(np.sqrt(self.data), parents=(self,))
        if out._parents:
            out._backward = lambda: self.accumulate(out.grad * 0.5 / out.data)
        return out

    def sigmoid(self):
        x = self.data
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        sig = sig.astype(x.dtype, copy=False)
        out = Tensor(sig, parents=(self,))
        if out._parents:
            out._backward = lambda: self.accumulate(out.grad * out.data * (1.0 - out.data))
        return out

    def silu(self):
        sig = self.sigmoid().data
        out = Tensor(self.data * sig, parents=(self,))
        if out._parents:
            out._backward = lambda: self.accumulate(out.grad * (sig + self.data * sig * (1.0 - sig)))
        return out

    def softplus(self):
        out = Tensor(np.logaddexp(0.0, self.data).astype(self.data.dtype, copy=False), parents=(self,))
        if out._parents:
            def backward():
                sig = 1.0 / (1.0 + np.exp(-self.data))
                self.accumulate(out.grad * sig)
            out._backward = backward
        return out

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))
        if out._parents:
            def backward():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self.accumulate(np.broadcast_to(g, self.data.shape).copy())
            out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), parents=(self,))
        if out._parents:
            out._backward = lambda: self.accumulate(out.grad.reshape(self.data.shape))
        return out

    def transpose(self, axes):
        out = Tensor(self.data.transpose(axes), parents=(self,))
        if out._parents:
            inv = np.argsort(axes)
            out._backward = lambda: self.accumulate(out.grad.transpose(inv))
        return out

    def expand(self, shape):
        out = Tensor(np.broadcast_to(self.data, shape), parents=(self,))
        if out._parents:
            out._backward = lambda: self.accumulate(_unbroadcast(out.grad, self.data.shape))
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], parents=(self,))
        if out._parents:
            def backward():
                g = np.zeros_like(self.data)
                np.add.at(g, key, out.grad)
                self.accumulate(g)
            out._backward = backward
        return out


def _ensure(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_ensure(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    if out._parents:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate(out.grad[tuple(sl)])

        out._backward = backward
    return out


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
