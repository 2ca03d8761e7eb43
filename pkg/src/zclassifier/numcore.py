"""Reverse-mode autodiff on float64 numpy arrays, a counter-based RNG and a
finite-difference gradient checker.

Graphs are define-by-run: every op returns a fresh :class:`Node` holding its
value and one vector-Jacobian closure per parent. Nothing is cached between
forward passes.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(ArithmeticError):
    pass


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """A value in the computation graph.

    ``parents`` is a sequence of ``(node, vjp)`` pairs where ``vjp`` maps the
    upstream gradient of this node to the gradient contribution of ``node``.
    """

    __slots__ = ("value", "_grad", "parents", "requires_grad", "name")

    def __init__(self, value, parents: Sequence = (), requires_grad: bool = False, name: str | None = None):
        self.value = as_array(value)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)
        self._grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True).reshape(self.value.shape)
        else:
            self._grad += g

    def item(self) -> float:
        return float(self.value.reshape(()))

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def constant(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def parameter(x, name: str | None = None) -> Node:
    return Node(x, requires_grad=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a: Node, b: Node) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# elementwise binary ops


def add(a, b) -> Node:
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)
    return Node(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a, b)
    return Node(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ])


def mul(a, b) -> Node:
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a, b)
    return Node(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ])


def neg(a) -> Node:
    a = constant(a)
    return Node(-a.value, [(a, lambda g: -g)])


# elementwise unary ops


def exp(a) -> Node:
    a = constant(a)
    out = np.exp(a.value)
    return Node(out, [(a, lambda g: g * out)])


def log(a) -> Node:
    a = constant(a)
    return Node(np.log(a.value), [(a, lambda g: g / a.value)])


def relu(a) -> Node:
    a = constant(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), [(a, lambda g: g * mask)])


def clip(a, lo: float, hi: float) -> Node:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = constant(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return Node(np.clip(a.value, lo, hi), [(a, lambda g: g * inside)])


# reductions and shape ops


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = constant(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape)

    return Node(out, [(a, vjp)])


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = constant(a)
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Node:
    a = constant(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return Node(out, [(a, lambda g: g.reshape(a.shape))])


def transpose(a, axes=None) -> Node:
    a = constant(a)
    out = np.transpose(a.value, axes)
    inverse = None if axes is None else np.argsort(axes)
    return Node(out, [(a, lambda g: np.transpose(g, inverse))])


def getitem(a, index) -> Node:
    a = constant(a)
    out = a.value[index]

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return full

    return Node(out, [(a, vjp)])


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [constant(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[n.shape for n in nodes]) from None
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])
    parents = []
    for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(lo, hi)
        parents.append((n, lambda g, sl=tuple(sl): g[sl]))
    return Node(out, parents)


# linear algebra


def matmul(a, b) -> Node:
    a, b = constant(a), constant(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return Node(a.value @ b.value, [
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    ])


def softmax_cross_entropy(logits, labels) -> Node:
    """Mean softmax cross-entropy of ``logits [B, K]`` against integer labels."""
    logits = constant(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("softmax_cross_entropy: label out of range")
    z = logits.value
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    nll = log_norm - shifted[rows, labels]
    batch = z.shape[0]

    def vjp(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, labels] -= 1.0
        return g * probs / batch

    return Node(nll.mean(), [(logits, vjp)])


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# convolution


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Node:
    """2-D cross-correlation. ``x [N,C,H,W]``, ``w [O,C,kh,kw]``, ``b [O]``."""
    x, w = constant(x), constant(w)
    if x.value.ndim != 4 or w.value.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape)
    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.value.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        b = constant(b)
        if b.shape != (o,):
            raise ShapeError("conv2d", w.shape, b.shape)
        out = out + b.value
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def grad_out2d(g):
        return g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)

    def vjp_x(g):
        dcols = (grad_out2d(g) @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
        return dxp[:, :, pad:pad + h, pad:pad + wd]

    parents = [
        (x, vjp_x),
        (w, lambda g: (grad_out2d(g).T @ cols).reshape(w.shape)),
    ]
    if b is not None:
        parents.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return Node(out, parents)


def avg_pool2d(x, k: int) -> Node:
    """Non-overlapping ``k x k`` average pooling; H and W must divide by ``k``."""
    x = constant(x)
    if x.value.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError("avg_pool2d", x.shape, (k, k))
    n, c, h, w = x.shape
    out = x.value.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def vjp(g):
        return np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)

    return Node(out, [(x, vjp)])


# backward pass


def _topological(root: Node) -> list[Node]:
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
        for parent, _ in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.value.size != 1:
        raise ShapeError("backward (root must be scalar)", root.shape)
    if not root.requires_grad:
        return
    order = _topological(root)
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node._accumulate(g)
            continue
        for parent, vjp in node.parents:
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = np.array(contrib, dtype=np.float64).reshape(parent.shape)


# gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    analytic: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    numeric: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """``|a - b| / (|a| + |b|)`` in the 2-norm, 0 when both are below ``floor``."""
    scale = np.linalg.norm(a) + np.linalg.norm(b)
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def grad_check(f: Callable[[], Node], params: Iterable[Node], step: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` against central differences.

    ``f`` rebuilds its graph from the current values of ``params`` on every
    call; the parameters are perturbed in place and restored afterwards.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    root = f()
    if not np.isfinite(root.value).all():
        raise NonFiniteError("grad_check: f is not finite at the base point")
    backward(root)
    report = GradCheckReport(errors={}, tolerance=tolerance)
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = f().item()
            flat[j] = orig - step
            down = f().item()
            flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteError(f"grad_check: f not finite when probing {name}[{j}]")
            numeric.reshape(-1)[j] = (up - down) / (2 * step)
        report.errors[name] = relative_error(analytic, numeric)
        report.analytic[name] = analytic
        report.numeric[name] = numeric
    for p in params:
        p.zero_grad()
    return report


# random numbers


def _stream_id(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & _MASK64


def _mix(a: int, b: int) -> int:
    # splitmix64 finalizer over the combined words
    z = (a * 0x9E3779B97F4A7C15 + b + 0x632BE59BD9B4E019) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Philox counter-based generator keyed by ``(seed, stream)``.

    ``split`` derives an independent child stream, so consumers such as data
    shuffling, weight init and noise sampling never share a counter.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def split(self, key) -> "Rng":
        return Rng(self.seed, _mix(self.stream, _stream_id(key)))

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        # Box-Muller on the uniform stream
        shape = (int(shape),) if isinstance(shape, (int, np.integer)) else tuple(shape)
        n = math.prod(shape)
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, high: int, size=None):
        return self._gen.integers(0, high, size=size)


def randn(rng: Rng, shape) -> np.ndarray:
    return rng.normal(shape)


def rand_uniform(rng: Rng, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"rand_uniform: need lo < hi, got lo={lo}, hi={hi}")
    return lo + (hi - lo) * rng.uniform(shape)
