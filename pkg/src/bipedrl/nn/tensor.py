"""Reverse-mode automatic differentiation over dense float32 numpy arrays.

A ``Tensor`` wraps an ndarray and records the closure needed to push its
output gradient back to its parents. Graphs are built eagerly by the op
functions below and differentiated by calling ``backward()`` on a scalar
tensor. The op set is deliberately small: exactly what batched MLPs with
Gaussian heads, softmax gates and least-squares discriminator losses need.

Conventions:
  * data is always float32, gradients are float32;
  * broadcasting is supported for elementwise ops wherever numpy allows it,
    and the backward pass sums gradients back down to each parent's shape;
  * ``matmul`` is strictly 2-D;
  * leaf tensors may share their ``grad`` buffer with a parameter store so
    that accumulation happens in place.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, DimensionError, NumericError

# When True, every op validates its output for NaN/Inf. Slow; enabled by
# tests and by training loops after a NaN loss is detected to locate it.
DEBUG_CHECK_FINITE = False


def _f32(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    return arr


def _sum_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    # sum over leading axes added by broadcasting
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum over axes that were size 1 in the original
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None, name: str = ""):
        self.data = _f32(data)
        self.grad = None  # lazily allocated; may alias a ParamStore buffer
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward_fn = backward_fn if self.requires_grad else None
        self.name = name

    # ---- graph mechanics -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float32, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that requires no grad")
        # iterative topological order (graphs get deep during long rollups)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
                if DEBUG_CHECK_FINITE:
                    for p in node._parents:
                        if p.grad is not None and not np.all(np.isfinite(p.grad)):
                            raise NumericError(f"non-finite gradient produced by op '{node.name}'")

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'}, name={self.name!r})"

    # operator sugar used sparingly in the loss code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def const(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _check_finite(out: Tensor, opname: str):
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise NumericError(f"non-finite value produced by op '{opname}'")


def _as_operand(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating)):
        return float(x)
    raise ContractError(f"operand must be Tensor or scalar, got {type(x).__name__}")


# ---- elementwise arithmetic ---------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_operand(b)
    if isinstance(b, float):
        out = Tensor(a.data + np.float32(b), parents=(a,), name="add")

        def bw(g, a=a):
            a._accumulate(_sum_to_shape(g, a.data.shape))

        out._backward_fn = bw if out.requires_grad else None
        return out
    out = Tensor(a.data + b.data, parents=(a, b), name="add")

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g, b.data.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_operand(b)
    if isinstance(b, float):
        return add(a, -b)
    return add(a, mul(b, -1.0))


def mul(a: Tensor, b) -> Tensor:
    b = _as_operand(b)
    if isinstance(b, float):
        out = Tensor(a.data * np.float32(b), parents=(a,), name="mul")

        def bw(g, a=a, s=np.float32(b)):
            a._accumulate(_sum_to_shape(g * s, a.data.shape))

        out._backward_fn = bw if out.requires_grad else None
        return out
    out = Tensor(a.data * b.data, parents=(a, b), name="mul")

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g * a.data, b.data.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data, parents=(a, b), name="div")

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, parents=(a,), name="square")

    def bw(g, a=a):
        a._accumulate(_sum_to_shape(2.0 * g * a.data, a.data.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


def sqrt(a: Tensor) -> Tensor:
    val = np.sqrt(a.data)
    out = Tensor(val, parents=(a,), name="sqrt")

    def bw(g, a=a, val=val):
        a._accumulate(_sum_to_shape(g * (0.5 / val), a.data.shape))

    out._backward_fn = bw if out.requires_grad else None
    _check_finite(out, "sqrt")
    return out


def exp(a: Tensor) -> Tensor:
    val = np.exp(a.data)
    out = Tensor(val, parents=(a,), name="exp")

    def bw(g, a=a, val=val):
        a._accumulate(_sum_to_shape(g * val, a.data.shape))

    out._backward_fn = bw if out.requires_grad else None
    _check_finite(out, "exp")
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), parents=(a,), name="log")

    def bw(g, a=a):
        a._accumulate(_sum_to_shape(g / a.data, a.data.shape))

    out._backward_fn = bw if out.requires_grad else None
    _check_finite(out, "log")
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi] (saturating clamp)."""
    val = np.clip(a.data, lo, hi)
    mask = ((a.data > lo) & (a.data < hi)).astype(np.float32)
    out = Tensor(val, parents=(a,), name="clip")

    def bw(g, a=a, mask=mask):
        a._accumulate(_sum_to_shape(g * mask, a.data.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; gradient routes to the smaller operand (ties -> a)."""
    take_a = (a.data <= b.data).astype(np.float32)
    out = Tensor(np.minimum(a.data, b.data), parents=(a, b), name="minimum")

    def bw(g, a=a, b=b, take_a=take_a):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g * (1.0 - take_a), b.data.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


# ---- activations ---------------------------------------------------------


def elu(a: Tensor) -> Tensor:
    # exp(min(x, 0)) serves both the negative branch value (e - 1) and the
    # derivative (e below zero, 1 above); avoids slow masked ufuncs
    x = a.data
    e = np.exp(np.minimum(x, 0.0))
    pos = x > 0.0
    val = np.where(pos, x, e - 1.0)
    out = Tensor(val, parents=(a,), name="elu")

    def bw(g, a=a, pos=pos, e=e):
        a._accumulate(_sum_to_shape(g * np.where(pos, np.float32(1.0), e), a.data.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


def elu_prime(a: Tensor) -> Tensor:
    """Derivative of ELU as a differentiable op (exp(x) below 0, else 1).

    Used to express discriminator input-gradients inside the tape so the
    gradient penalty itself can be differentiated with one backward pass.
    """
    x = a.data
    e = np.exp(np.minimum(x, 0.0))
    pos = x > 0.0
    out = Tensor(np.where(pos, np.float32(1.0), e), parents=(a,), name="elu_prime")

    def bw(g, a=a, pos=pos, e=e):
        a._accumulate(_sum_to_shape(g * np.where(pos, np.float32(0.0), e), a.data.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, parents=(a,), name="softmax")

    def bw(g, a=a, s=s, axis=axis):
        dot = (g * s).sum(axis=axis, keepdims=True)
        a._accumulate(_sum_to_shape(s * (g - dot), a.data.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


# ---- linear algebra / reductions -----------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, parents=(a, b), name="matmul")

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward_fn = bw if out.requires_grad else None
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    val = a.data.sum(axis=axis, keepdims=keepdims)
    out = Tensor(val, parents=(a,), name="sum")

    def bw(g, a=a, axis=axis, keepdims=keepdims):
        gg = np.asarray(g, dtype=np.float32)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.data.shape).astype(np.float32))

    out._backward_fn = bw if out.requires_grad else None
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def concat(tensors: list, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), parents=tuple(tensors), name="concat")
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(g, tensors=tensors, offsets=offsets, axis=axis):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    out._backward_fn = bw if out.requires_grad else None
    return out
