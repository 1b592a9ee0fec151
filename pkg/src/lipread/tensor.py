"""Minimal dense tensor with reverse-mode gradients.

Only the handful of ops the lipreading network needs are supported (see
:mod:`lipread.layers`). Each op builds a node holding its parents and a
closure that pushes the output gradient back to them.
"""
from __future__ import annotations

import contextlib

import numpy as np

_DTYPE = np.float32


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    """Switch the global compute precision (float32 or float64)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily run in another precision; float64 is for gradient checks."""
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, _op=None):
        arr = np.asarray(data, dtype=_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values produced by {_op or 'input'}")
        self.data = arr
        self.grad = None
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in self._parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype.name})"

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate gradients to every reachable tensor that requires them."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        # iterative post-order; recursion would overflow on long recurrent tapes
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents and node is not self:
                    # interior buffers are not needed after propagation
                    node.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)
