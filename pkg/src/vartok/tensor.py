"""Dense arrays with reverse-mode differentiation.

A `Tensor` wraps a numpy array and records enough of the computation graph to
backpropagate from a scalar loss.  The op set is exactly what a patch
transformer needs: broadcast arithmetic, (batched) matmul, a few fused
nonlinearities, reductions, and shape surgery.  Kernels are numpy, so heavy
lifting lands in BLAS; precision is whatever dtype the leaves carry
(float32 for training throughput, float64 for finite-difference checks).
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
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
    """A numpy array plus an optional gradient buffer of identical shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray, own: bool = False):
        """Add `grad` into this tensor's gradient buffer.

        `own=True` promises the buffer is freshly allocated (or a writable
        view no other edge will touch), so it can be bound without a copy.
        """
        if self.grad is None:
            if own:
                self.grad = grad
            else:
                self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    # -- autodiff driver ------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar; fills `.grad` on reachable leaves."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                # free graph refs; grads on leaves survive
                node._backward = None
                node._parents = ()

    # -- arithmetic -----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out_data = a.data + b.data

        def backward(g):
            if a.requires_grad:
                ga = _unbroadcast(g, a.data.shape)
                a._accumulate(ga, own=ga is not g)
            if b.requires_grad:
                gb = _unbroadcast(g, b.data.shape)
                b._accumulate(gb, own=True)

        return Tensor._result(out_data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate(-g, own=True)

        return Tensor._result(-a.data, (a,), backward)

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out_data = a.data - b.data

        def backward(g):
            if a.requires_grad:
                ga = _unbroadcast(g, a.data.shape)
                a._accumulate(ga, own=ga is not g)
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.data.shape), own=True)

        return Tensor._result(out_data, (a, b), backward)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out_data = a.data * b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape), own=True)
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape), own=True)

        return Tensor._result(out_data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out_data = a.data / b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.data.shape), own=True)
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape), own=True)

        return Tensor._result(out_data, (a, b), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise ContractError("only scalar exponents are supported")
        a = self
        out_data = a.data ** exponent

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * exponent * a.data ** (exponent - 1), own=True)

        return Tensor._result(out_data, (a,), backward)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self
        out_data = a.data[idx]
        basic = isinstance(idx, (int, slice)) or (
            isinstance(idx, tuple) and all(isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in idx)
        )

        def backward(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                if basic:
                    full[idx] += g
                else:
                    np.add.at(full, idx, g)
                a._accumulate(full, own=True)

        return Tensor._result(out_data, (a,), backward)

    # -- shape surgery ----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old_shape = a.data.shape
        out_data = a.data.reshape(shape)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g.reshape(old_shape), own=True)

        return Tensor._result(out_data, (a,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inverse = tuple(np.argsort(axes))
        out_data = a.data.transpose(axes)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g.transpose(inverse), own=True)

        return Tensor._result(out_data, (a,), backward)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)
        in_shape = a.data.shape

        def backward(g):
            if not a.requires_grad:
                return
            if axis is None:
                g = g.reshape((1,) * len(in_shape))
            elif not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g, in_shape))

        return Tensor._result(out_data, (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


# -- free-function ops ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading dims with broadcasting."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape), own=True)
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape), own=True)

    return Tensor._result(out_data, (a, b), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)], own=True)

    return Tensor._result(out_data, tuple(tensors), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data, own=True)

    return Tensor._result(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data, own=True)

    return Tensor._result(out_data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (0.5 / out_data), own=True)

    return Tensor._result(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data), own=True)

    return Tensor._result(out_data, (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    out_data = _kernels.gelu_fwd(x)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_kernels.gelu_bwd(x, g), own=True)

    return Tensor._result(out_data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if axis not in (-1, a.ndim - 1):
        raise ContractError("softmax supports the last axis only")
    out_data = _kernels.softmax_fwd(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_kernels.softmax_bwd(out_data, g), own=True)

    return Tensor._result(out_data, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            axes = tuple(range(g.ndim - 1))
            gain._accumulate((g * xhat).sum(axis=axes), own=True)
        if bias.requires_grad:
            axes = tuple(range(g.ndim - 1))
            bias._accumulate(g.sum(axis=axes), own=True)
        if a.requires_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            term *= inv
            a._accumulate(term, own=True)

    return Tensor._result(out_data, (a, gain, bias), backward)


def rotate_half(a: Tensor) -> Tensor:
    """Map [x1, x2] halves of the last axis to [-x2, x1] (rotary helper)."""
    d = a.data.shape[-1]
    if d % 2:
        raise ShapeError(f"rotate_half needs an even last extent, got {d}")
    h = d // 2
    out_data = np.concatenate([-a.data[..., h:], a.data[..., :h]], axis=-1)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.concatenate([g[..., h:], -g[..., :h]], axis=-1), own=True)

    return Tensor._result(out_data, (a,), backward)


def ste_round(a: Tensor) -> Tensor:
    """Round to nearest integer; gradient passes straight through."""
    out_data = np.round(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g, own=True)

    return Tensor._result(out_data, (a,), backward)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) and dtype is None else Tensor(x, dtype=dtype)
