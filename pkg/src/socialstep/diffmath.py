"""Reverse-mode automatic differentiation over small dense float64 tensors.

Define-by-run: every operation records its inputs and a gradient closure on
the output tensor, so the graph is rebuilt on each forward pass and variable
pedestrian counts need no padding. A single `backward` on a scalar root
resets and repopulates `.grad` on everything reachable from it.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not line up."""


class Tensor:
    """Dense float64 tensor node in an autodiff graph.

    `data` holds the values, `grad` is filled by `backward` (None until
    then). Leaves are tensors created directly from data; everything else
    carries the parent references and gradient closure of the op that
    produced it.
    """

    __slots__ = ("data", "grad", "op", "_parents", "_grad_fn")

    def __init__(self, data, _parents: tuple = (), _op: str = "leaf",
                 _grad_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.op = _op
        self._parents = _parents
        self._grad_fn = _grad_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    # ---- elementwise arithmetic ----

    def __add__(self, other):
        other = _wrap_like(other, self)
        _check_same_shape(self, other, "add")
        return Tensor(self.data + other.data, (self, other), "add",
                      lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap_like(other, self)
        _check_same_shape(self, other, "sub")
        return Tensor(self.data - other.data, (self, other), "sub",
                      lambda g: (g, -g))

    def __rsub__(self, other):
        return _wrap_like(other, self) - self

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        _check_same_shape(self, other, "mul")
        return Tensor(self.data * other.data, (self, other), "mul",
                      lambda g: (g * other.data, g * self.data))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            if other == 0.0:
                raise ValueError("division by zero")
            return self.scale(1.0 / float(other))
        _check_same_shape(self, other, "div")
        if np.any(other.data == 0.0):
            raise ValueError("division by zero")
        inv = 1.0 / other.data
        return Tensor(self.data * inv, (self, other), "div",
                      lambda g: (g * inv, -g * self.data * inv * inv))

    def __neg__(self):
        return Tensor(-self.data, (self,), "neg", lambda g: (-g,))

    def scale(self, c: float):
        c = float(c)
        return Tensor(self.data * c, (self,), "scale", lambda g: (g * c,))

    def square(self):
        return Tensor(self.data * self.data, (self,), "square",
                      lambda g: (2.0 * g * self.data,))

    def sqrt(self):
        if np.any(self.data < 0.0):
            raise ValueError("sqrt of negative value")
        out = np.sqrt(self.data)
        return Tensor(out, (self,), "sqrt", lambda g: (g * 0.5 / out,))

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, (self,), "exp", lambda g: (g * out,))

    def log(self):
        if np.any(self.data <= 0.0):
            raise ValueError("log of non-positive value")
        return Tensor(np.log(self.data), (self,), "log",
                      lambda g: (g / self.data,))

    def relu(self):
        # subgradient at 0 is 0
        mask = self.data > 0.0
        return Tensor(np.where(mask, self.data, 0.0), (self,), "relu",
                      lambda g: (g * mask,))

    def sin(self):
        return Tensor(np.sin(self.data), (self,), "sin",
                      lambda g: (g * np.cos(self.data),))

    def cos(self):
        return Tensor(np.cos(self.data), (self,), "cos",
                      lambda g: (-g * np.sin(self.data),))

    # ---- shape ops ----

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = self.data.reshape(shape)
        return Tensor(out, (self,), "reshape",
                      lambda g: (g.reshape(old),))

    def __getitem__(self, key):
        out = self.data[key]

        def grad_fn(g, key=key):
            buf = np.zeros_like(self.data)
            np.add.at(buf, key, g)
            return (buf,)

        return Tensor(out, (self,), "getitem", grad_fn)

    def __matmul__(self, other):
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError("matmul expects 2-d tensors")
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(
                f"matmul inner dims disagree: {self.data.shape} x {other.data.shape}")
        return Tensor(self.data @ other.data, (self, other), "matmul",
                      lambda g: (g @ other.data.T, self.data.T @ g))

    # ---- reductions ----

    def sum(self, axis: int | None = None):
        out = self.data.sum(axis=axis)

        def grad_fn(g, axis=axis):
            if axis is None:
                return (np.full_like(self.data, g),)
            return (np.broadcast_to(np.expand_dims(g, axis), self.data.shape).copy(),)

        return Tensor(out, (self,), "sum", grad_fn)

    def mean(self, axis: int | None = None):
        n = self.data.size if axis is None else self.data.shape[axis]
        if n == 0:
            raise ValueError("mean over empty axis")
        return self.sum(axis=axis).scale(1.0 / n)

    def min(self, axis: int | None = None):
        return _hard_extremum(self, axis, np.argmin, "min")

    def max(self, axis: int | None = None):
        return _hard_extremum(self, axis, np.argmax, "max")

    def logsumexp(self, tau: float, axis: int | None = None):
        """Smooth maximum: tau * log(sum(exp(x / tau))) along `axis`."""
        if tau <= 0.0:
            raise ValueError("logsumexp temperature must be positive")
        _check_nonempty_axis(self, axis, "logsumexp")
        m = self.data.max(axis=axis, keepdims=True)
        e = np.exp((self.data - m) / tau)
        s = e.sum(axis=axis, keepdims=True)
        out = tau * np.log(s) + m
        soft = e / s

        def grad_fn(g, axis=axis):
            if axis is None:
                return (soft * g,)
            return (soft * np.expand_dims(g, axis),)

        out = out if axis is None else np.squeeze(out, axis=axis)
        if axis is None:
            out = out.reshape(())
        return Tensor(out, (self,), "logsumexp", grad_fn)

    # ---- backward ----

    def backward(self):
        backward(self)


def _wrap_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(ref.data.shape, float(x)))


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def _check_nonempty_axis(t: Tensor, axis, op: str):
    n = t.data.size if axis is None else t.data.shape[axis]
    if n == 0:
        raise ValueError(f"{op} over empty axis")


def _hard_extremum(t: Tensor, axis, argfn, name: str):
    """Hard min/max; gradient routes to the first arg-extreme element on ties."""
    _check_nonempty_axis(t, axis, name)
    if axis is None:
        flat_idx = argfn(t.data)  # first occurrence
        out = t.data.reshape(-1)[flat_idx]

        def grad_fn(g, flat_idx=flat_idx):
            buf = np.zeros_like(t.data)
            buf.reshape(-1)[flat_idx] = g
            return (buf,)

        return Tensor(np.asarray(out), (t,), name, grad_fn)

    idx = argfn(t.data, axis=axis)
    out = np.take_along_axis(t.data, np.expand_dims(idx, axis), axis=axis)

    def grad_fn(g, idx=idx, axis=axis):
        buf = np.zeros_like(t.data)
        np.put_along_axis(buf, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis=axis)
        return (buf,)

    return Tensor(np.squeeze(out, axis=axis), (t,), name, grad_fn)


def tensor(data) -> Tensor:
    return Tensor(data)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    """Elementwise two-argument arctangent with gradients to both inputs."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_same_shape(y, x, "atan2")
    denom = y.data * y.data + x.data * x.data
    if np.any(denom == 0.0):
        raise ValueError("atan2 undefined at the origin")
    return Tensor(np.arctan2(y.data, x.data), (y, x), "atan2",
                  lambda g: (g * x.data / denom, -g * y.data / denom))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along `axis`; gradient splits back to the parts."""
    parts = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of no tensors")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return Tensor(out, tuple(parts), "concat", grad_fn)


def stack_scalars(items: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-d tensor."""
    return concat([it.reshape(1) for it in items], axis=0)


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate `.grad` with d(root)/d(tensor) for every tensor reachable
    from `root`. Grads are reset on each call, never accumulated across calls.
    """
    if root.data.size != 1:
        raise ValueError("backward requires a scalar root")
    order = _topo(root)
    for t in order:
        t.grad = np.zeros_like(t.data)
    root.grad = np.ones_like(root.data)
    for t in reversed(order):
        if t._grad_fn is None:
            continue
        gs = t._grad_fn(t.grad)
        for p, g in zip(t._parents, gs):
            p.grad = p.grad + np.asarray(g).reshape(p.data.shape)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    out = f(x)
    backward(out)
    analytic = x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(x.data.copy())).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(x.data.copy())).data)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
