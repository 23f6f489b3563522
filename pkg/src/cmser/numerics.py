"""Double-precision tensors with a small reverse-mode differentiation engine.

Values are plain ``numpy.float64`` arrays; a :class:`Node` wraps one value
together with the operation that produced it. Only the fixed operator set
needed by the cross-modal classifier is provided.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GradCheckError, MaskError, ShapeError

Tensor = np.ndarray

_MATMUL_KERNEL = "exact"


def set_matmul_kernel(kernel: str) -> None:
    """Select ``"exact"`` (sequential inner-product order) or ``"blas"``."""
    global _MATMUL_KERNEL
    if kernel not in ("exact", "blas"):
        raise ValueError(f"unknown matmul kernel {kernel!r}")
    _MATMUL_KERNEL = kernel


@contextlib.contextmanager
def matmul_kernel(kernel: str):
    previous = _MATMUL_KERNEL
    set_matmul_kernel(kernel)
    try:
        yield
    finally:
        set_matmul_kernel(previous)


class Node:
    """A value in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; their
    ``grad`` accumulates across :func:`backward` calls until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("value", "_grad", "parents", "op", "_backward", "requires_grad", "name")

    def __init__(self, value, parents: tuple = (), op: str = "leaf", backward=None,
                 requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.parents = parents
        self.op = op
        self._backward = backward
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def grad(self) -> Tensor:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = np.asarray(g, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(op={self.op}, shape={self.shape})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)
    __hash__ = object.__hash__


def parameter(value, name: str | None = None) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def _make(value, parents: tuple, op: str, backward) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(value, parents, op, backward if needs else None, requires_grad=needs)


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- products -----------------------------------------------------------------

def _exact_matmul(a: Tensor, b: Tensor) -> Tensor:
    # accumulate over the inner index in order, one multiply and one add per term
    k = a.shape[-1]
    out_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    out = np.zeros(out_shape)
    for t in range(k):
        out += a[..., :, t:t + 1] * b[..., t:t + 1, :]
    return out


def _raw_matmul(a: Tensor, b: Tensor) -> Tensor:
    if _MATMUL_KERNEL == "blas":
        return np.matmul(a, b)
    return _exact_matmul(a, b)


def matmul(a, b) -> Node:
    """Batched matrix product over the last two axes."""
    a, b = constant(a), constant(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(_raw_matmul(g, np.swapaxes(bv, -1, -2)), av.shape))
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                a2 = av.reshape(-1, av.shape[-1])
                acc(b, _raw_matmul(a2.T, g.reshape(-1, g.shape[-1])))
            else:
                acc(b, _unbroadcast(_raw_matmul(np.swapaxes(av, -1, -2), g), bv.shape))

    return _make(_raw_matmul(av, bv), (a, b), "matmul", backward)


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Node:
    a, b = constant(a), constant(b)

    def backward(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), "add", backward)


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)

    def backward(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(-g, b.shape))

    return _make(a.value - b.value, (a, b), "sub", backward)


def mul(a, b) -> Node:
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value

    def backward(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g * bv, av.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(g * av, bv.shape))

    return _make(av * bv, (a, b), "mul", backward)


def tanh(x) -> Node:
    x = constant(x)
    y = np.tanh(x.value)

    def backward(g, acc):
        acc(x, g * (1.0 - y * y))

    return _make(y, (x,), "tanh", backward)


def _sigmoid(v: Tensor) -> Tensor:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Node:
    x = constant(x)
    y = _sigmoid(x.value)

    def backward(g, acc):
        acc(x, g * y * (1.0 - y))

    return _make(y, (x,), "sigmoid", backward)


def relu(x) -> Node:
    x = constant(x)
    pos = x.value > 0

    def backward(g, acc):
        acc(x, g * pos)

    return _make(np.where(pos, x.value, 0.0), (x,), "relu", backward)


def stable_softplus(v: Tensor) -> Tensor:
    """``log(1 + exp(v))`` without overflow for large ``|v|``."""
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def softplus(x) -> Node:
    x = constant(x)

    def backward(g, acc):
        acc(x, g * _sigmoid(x.value))

    return _make(stable_softplus(x.value), (x,), "softplus", backward)


# -- shape manipulation -------------------------------------------------------

def reshape(x, shape: Sequence[int]) -> Node:
    x = constant(x)
    old = x.shape

    def backward(g, acc):
        acc(x, g.reshape(old))

    return _make(x.value.reshape(shape), (x,), "reshape", backward)


def transpose(x, axis1: int = -1, axis2: int = -2) -> Node:
    x = constant(x)

    def backward(g, acc):
        acc(x, np.swapaxes(g, axis1, axis2))

    return _make(np.swapaxes(x.value, axis1, axis2), (x,), "transpose", backward)


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = tuple(constant(n) for n in nodes)
    values = [n.value for n in nodes]
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g, acc):
        for node, piece in zip(nodes, np.split(g, sizes, axis=axis)):
            if node.requires_grad:
                acc(node, piece)

    return _make(np.concatenate(values, axis=axis), nodes, "concat", backward)


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = tuple(constant(n) for n in nodes)

    def backward(g, acc):
        for i, node in enumerate(nodes):
            if node.requires_grad:
                acc(node, np.take(g, i, axis=axis))

    return _make(np.stack([n.value for n in nodes], axis=axis), nodes, "stack", backward)


def take(x, index) -> Node:
    """Basic (slice/integer) indexing. Gradients scatter back into ``index``."""
    x = constant(x)

    def backward(g, acc):
        acc(x, g, index)

    return _make(x.value[index], (x,), "slice", backward)


# -- reductions ---------------------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    x = constant(x)
    shape = x.shape

    def backward(g, acc):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        acc(x, np.broadcast_to(g, shape).copy())

    return _make(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), "sum", backward)


def mean(x, axis=None, keepdims: bool = False) -> Node:
    x = constant(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- normalisation ------------------------------------------------------------

def softmax(x, mask: Tensor | None = None) -> Node:
    """Softmax over the last axis.

    ``mask`` (boolean, broadcastable to ``x``) marks admissible positions;
    the others get exactly zero probability. Every row needs at least one
    admissible entry.
    """
    x = constant(x)
    v = x.value
    if mask is None:
        shifted = v - v.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        if not mask.any(axis=-1).all():
            raise MaskError("softmax row with no unmasked entries")
        peak = np.where(mask, v, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, v - peak, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g, acc):
        acc(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), "softmax", backward)


def log_softmax(x) -> Node:
    x = constant(x)
    v = x.value
    shifted = v - v.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def backward(g, acc):
        acc(x, g - probs * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), "log_softmax", backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Node:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = constant(x), constant(gamma), constant(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm length mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.value.mean(axis=-1, keepdims=True)
    centred = x.value - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    gv = gamma.value

    def backward(g, acc):
        if x.requires_grad:
            dxhat = g * gv
            acc(x, inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)))
        if gamma.requires_grad:
            acc(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            acc(beta, g.reshape(-1, n).sum(axis=0))

    return _make(xhat * gv + beta.value, (x, gamma, beta), "layer_norm", backward)


def scaled_dot_attention(q, k, v, key_mask: Tensor | None = None) -> Node:
    """``softmax(q kᵀ / sqrt(d)) v`` over the last two axes."""
    q, k, v = constant(q), constant(k), constant(v)
    d = q.shape[-1]
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)[..., None, :]
    return matmul(softmax(scores, key_mask), v)


# -- differentiation ----------------------------------------------------------

def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Node) -> dict[Node, Tensor]:
    """Back-propagate from a scalar ``loss``.

    Parameter gradients accumulate into ``Node.grad`` (call
    :func:`zero_grad` between steps). Returns the gradient contributed
    by this call for every reachable parameter.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, Tensor] = {id(loss): np.ones_like(loss.value)}
    contributed: dict[Node, Tensor] = {}
    owned: set[int] = set()

    def acc(node: Node, g: Tensor, index=None) -> None:
        if not node.requires_grad:
            return
        key = id(node)
        if index is not None:
            if key not in owned:
                buf = np.zeros_like(node.value)
                if key in grads:
                    buf += grads[key]
                grads[key] = buf
                owned.add(key)
            grads[key][index] += g
        elif key in grads:
            grads[key] = grads[key] + g
            owned.add(key)
        else:
            # may alias another node's gradient; copied before any in-place write
            grads[key] = g

    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = node.grad + g
            contributed[node] = g
        elif node._backward is not None:
            node._backward(g, acc)
    return contributed


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(f: Callable[[], Node], params: Sequence[Node], eps: float = 1e-5,
               n_samples: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` must rebuild the graph from the current parameter values on every
    call. ``n_samples`` coordinates are drawn uniformly over all parameters
    (every coordinate when ``None``).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    zero_grad(params)
    loss = f()
    if not np.isfinite(loss.value).all():
        raise GradCheckError("loss is not finite at the base point")
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.value.size)]
    if n_samples is not None and n_samples < len(coords):
        picks = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in np.sort(picks)]

    worst = 0.0
    for i, j in coords:
        flat = params[i].value.reshape(-1)
        saved = flat[j]
        flat[j] = saved + eps
        up = float(f().value)
        flat[j] = saved - eps
        down = float(f().value)
        flat[j] = saved
        if not (math.isfinite(up) and math.isfinite(down)):
            raise GradCheckError(f"non-finite loss perturbing parameter {i} coordinate {j}")
        numeric = (up - down) / (2.0 * eps)
        exact = float(analytic[i].reshape(-1)[j])
        if not math.isfinite(exact):
            raise GradCheckError(f"non-finite analytic gradient at parameter {i} coordinate {j}")
        worst = max(worst, abs(exact - numeric) / max(1e-8, abs(numeric)))
    zero_grad(params)
    return worst
