"""Reverse-mode autodiff over float64 numpy arrays.

Only the handful of ops needed by the encoder, decoder, discriminator and
policy network are provided. Every node records the name of the op that
produced it; :func:`gradients` refuses graphs containing anything else.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

SUPPORTED_OPS = frozenset({
    "leaf", "const", "add", "sub", "mul", "div", "neg", "matmul",
    "leaky_relu", "relu", "sigmoid", "exp", "log", "abs", "sqrt", "square",
    "softmax", "log_softmax", "sum", "mean", "max", "reshape", "transpose",
    "concat", "detach", "getitem", "clip",
})

UNARY_KINDS = frozenset({"leaky-relu", "relu", "exp", "log", "neg", "sigmoid", "abs"})
BINARY_KINDS = frozenset({"add", "sub", "multiply", "divide"})


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: Sequence["Tensor"] = (), backward: Callable | None = None):
        if op not in SUPPORTED_OPS:
            raise ValueError(f"unsupported op {op!r}")
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.grad: np.ndarray | None = None

    # --- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # --- arithmetic -----------------------------------------------------
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _node(data, op, parents, backward_fn) -> Tensor:
    return Tensor(data, op=op, parents=parents, backward=backward_fn)


# --- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _node(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _node(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _node(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _node(out, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, slope * a.data), "leaky_relu", (a,),
                 lambda g: (np.where(pos, g, slope * g),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), "relu", (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (g * inside,))


def detach(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data.copy(), op="detach")


# --- linear algebra & reductions ----------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _node(a.data @ b.data, "matmul", (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _node(out, "softmax", (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _node(out, "log_softmax", (a,), bw)


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims).copy(),))


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)
    return _node(out, "mean", (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims) / count,))


def tmax(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def bw(g):
        full = out if keepdims or axis is None else np.expand_dims(out, axis)
        hit = (a.data == full).astype(np.float64)
        # ties split the gradient evenly
        hit /= hit.sum(axis=axis, keepdims=True)
        return (_expand(g, a.shape, axis, keepdims) * hit,)
    return _node(out, "max", (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inv),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _node(np.concatenate([t.data for t in ts], axis=axis), "concat", ts, bw)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)
    return _node(a.data[idx], "getitem", (a,), bw)


# --- public elementwise entry point -------------------------------------
def elementwise(kind: str, a, b=None, slope: float = 0.2) -> Tensor:
    """Strict elementwise op: binary kinds require identical shapes."""
    a = as_tensor(a)
    if kind in UNARY_KINDS:
        if b is not None:
            raise ValueError(f"{kind} is unary")
        return {
            "leaky-relu": lambda: leaky_relu(a, slope),
            "relu": lambda: relu(a),
            "exp": lambda: exp(a),
            "log": lambda: log(a),
            "neg": lambda: neg(a),
            "sigmoid": lambda: sigmoid(a),
            "abs": lambda: tabs(a),
        }[kind]()
    if kind not in BINARY_KINDS:
        raise ValueError(f"unknown elementwise op {kind!r}")
    if b is None:
        raise ValueError(f"{kind} needs two operands")
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return {"add": add, "sub": sub, "multiply": mul, "divide": div}[kind](a, b)


# --- backward pass ------------------------------------------------------
def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    for node in order:
        if node.op not in SUPPORTED_OPS:
            raise ValueError(f"unsupported op {node.op!r} in graph")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op == "leaf":
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def gradients(loss: Tensor, params) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to each tensor of ``params``.

    ``params`` is a :class:`~rlasc.core.params.ParamBlock` or a name->Tensor
    mapping. Existing ``.grad`` slots are reset first; parameters the loss
    does not depend on get a zero gradient.
    """
    items = params.items()
    for _, t in items:
        t.grad = None
    backward(loss)
    return {name: (np.zeros_like(t.data) if t.grad is None else t.grad)
            for name, t in items}
