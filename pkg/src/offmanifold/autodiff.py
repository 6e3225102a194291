"""Dense float64 tensors with reverse-mode differentiation.

The backward pass is written with the same differentiable operations as the
forward pass, so ``grad(..., create_graph=True)`` returns tensors that can be
differentiated again (double backpropagation for gradient penalties).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "record", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _recording()
    _state.record = False
    try:
        yield
    finally:
        _state.record = prev


@contextmanager
def _record(flag: bool):
    prev = _recording()
    _state.record = flag
    try:
        yield
    finally:
        _state.record = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __pow__(self, p):
        if p != 2:
            raise ValueError("only squaring is supported")
        return square(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by '{op}'")
    out = Tensor(data)
    out.op = op
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
    return out


def sum_to_shape(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    axes = list(range(extra))
    axes += [i + extra for i, n in enumerate(shape) if n == 1 and g.shape[i + extra] != 1]
    out = tsum(g, axis=tuple(axes), keepdims=True)
    return reshape(out, tuple(shape))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), "broadcast", (a,),
                 lambda g: (sum_to_shape(g, src),))


# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (sum_to_shape(g, a.shape), sum_to_shape(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (sum_to_shape(g, a.shape), sum_to_shape(neg(g), b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (sum_to_shape(mul(g, b), a.shape), sum_to_shape(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(ga, a), b))
        return sum_to_shape(ga, a.shape), sum_to_shape(gb, b.shape)

    return _make(a.data / b.data, "div", (a, b), vjp)


# elementwise unary


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (neg(g),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (mul(g, mul(a, 2.0)),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = None

    def vjp(g):
        return (mul(g, out),)

    out = _make(data, "exp", (a,), vjp)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make(data, "log", (a,), lambda g: (div(g, a),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def vjp(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(expit(a.data), "sigmoid", (a,), vjp)
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), "softplus", (a,), lambda g: (mul(g, sigmoid(a)),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def vjp(g):
        return (mul(g, sub(1.0, square(out))),)

    out = _make(np.tanh(a.data), "tanh", (a,), vjp)
    return out


def relu(a) -> Tensor:
    """Rectifier. Its derivative is a constant step, so second derivatives are zero."""
    a = as_tensor(a)
    step = Tensor((a.data > 0).astype(np.float64))
    return _make(np.maximum(a.data, 0.0), "relu", (a,), lambda g: (mul(g, step),))


def identity(a) -> Tensor:
    return as_tensor(a)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "softplus": softplus,
    "tanh": tanh,
    "relu": relu,
    "identity": identity,
}


# shape and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, "transpose", (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (reshape(g, src),))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        axes = tuple(ax % a.ndim for ax in np.atleast_1d(axis))

    def vjp(g):
        if not keepdims:
            kept = tuple(1 if i in axes else n for i, n in enumerate(src))
            g = reshape(g, kept)
        return (broadcast_to(g, src),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(a, axis=-1) -> Tensor:
    """Row-wise log-sum-exp; the max shift is a constant and does not change gradients."""
    a = as_tensor(a)
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    s = tsum(exp(sub(a, shift)), axis=axis, keepdims=True)
    return add(log(s), shift)


def log_softmax(a, axis=-1) -> Tensor:
    return sub(a, logsumexp(a, axis=axis))


def softmax(a, axis=-1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


def sumsq(a) -> Tensor:
    """Squared Frobenius norm."""
    return tsum(square(a))


# differentiation


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt, create_graph: bool = False):
    """Gradient of a scalar ``output`` with respect to one tensor or a sequence.

    With ``create_graph=True`` the returned gradients are themselves graph
    nodes and can be differentiated again.
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    if output.data.size != 1:
        raise ValueError(f"grad requires a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ValueError("output does not depend on any tensor requiring grad")
    order = _topo_order(output)
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    with _record(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    out = []
    for t in targets:
        g = grads.get(id(t))
        if g is None:
            raise ValueError("wrt tensor is not connected to output")
        out.append(g)
    return out[0] if single else out


# traced functions


class Graph:
    """A differentiable function of tensors with a fixed input signature.

    ``nodes`` holds the op names of the last trace in topological order.
    """

    def __init__(self, fn: Callable[..., Tensor], input_shapes: Sequence[tuple[int, ...]]):
        self.fn = fn
        self.input_shapes = [tuple(s) for s in input_shapes]
        self.nodes: list[str] = []

    def __call__(self, *inputs) -> Tensor:
        return forward(self, *inputs)


def forward(graph: Graph, *inputs) -> Tensor:
    if len(inputs) != len(graph.input_shapes):
        raise ValueError(f"expected {len(graph.input_shapes)} inputs, got {len(inputs)}")
    tensors = []
    for x, shape in zip(inputs, graph.input_shapes):
        x = as_tensor(x)
        if x.shape != shape:
            raise ValueError(f"input shape {x.shape} does not match signature {shape}")
        tensors.append(x)
    out = graph.fn(*tensors)
    if out.requires_grad:
        graph.nodes = [n.op for n in _topo_order(out)]
    return out


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between the AD gradient and central differences."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    ad = grad(fn(x), x).data.ravel()
    fd = np.empty(x0.size)
    flat = x0.ravel()
    # points require grad so fn may itself take gradients (grad-of-grad checks)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = fn(Tensor(xp.reshape(x0.shape), requires_grad=True)).item()
        fm = fn(Tensor(xm.reshape(x0.shape), requires_grad=True)).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("non-finite function value in finite differences")
        fd[i] = (fp - fm) / (xp[i] - xm[i])  # the step actually taken, after rounding
    return float(np.max(np.abs(ad - fd) / (np.abs(fd) + 1e-12)))
