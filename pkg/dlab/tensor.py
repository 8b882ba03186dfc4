"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a registered primitive (``PRIMITIVES``)
with a shape check, a numpy forward and a vector-Jacobian backward. Model
code calls ``apply`` (or the ``Tensor`` operator overloads); ``backward``
walks the recorded nodes in reverse topological order.
"""
from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from types import SimpleNamespace

import numpy as np
from scipy import special

from .exceptions import GraphError, ShapeError, UnknownPrimitiveError

logger = logging.getLogger(__name__)

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _active_graph():
    return getattr(_state, "graph", None)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o): return apply("add", self, o)
    def __radd__(self, o): return apply("add", o, self)
    def __sub__(self, o): return apply("sub", self, o)
    def __rsub__(self, o): return apply("sub", o, self)
    def __mul__(self, o): return apply("mul", self, o)
    def __rmul__(self, o): return apply("mul", o, self)
    def __neg__(self): return apply("mul", self, -1.0)
    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise TypeError("division by a Tensor is not a primitive")
        return apply("mul", self, 1.0 / float(o))
    def __matmul__(self, o): return apply("matmul", self, o)

    def sum(self, axis=None, keepdims=False): return apply("sum", self, axis=axis, keepdims=keepdims)
    def mean(self, axis=None, keepdims=False): return apply("mean", self, axis=axis, keepdims=keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=tuple(shape))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("primitive", "inputs", "attrs", "ctx", "output")

    def __init__(self, primitive, inputs, attrs, ctx, output):
        self.primitive = primitive
        self.inputs = inputs
        self.attrs = attrs
        self.ctx = ctx
        self.output = output


class Graph:
    """Topologically ordered tape of nodes recorded while running ``fn``."""

    def __init__(self, fn, name: str = "graph"):
        self.fn = fn
        self.name = name
        self.nodes: list[Node] = []
        self.outputs: dict[str, Tensor] = {}

    def __len__(self):
        return len(self.nodes)


# ===== Primitive registry =====
PRIMITIVES: dict[str, "Primitive"] = {}


def register(name: str):
    def deco(cls):
        inst = cls()
        inst.name = name
        PRIMITIVES[name] = inst
        return cls
    return deco


def get_primitive(name: str) -> "Primitive":
    try:
        return PRIMITIVES[name]
    except KeyError:
        raise UnknownPrimitiveError(name) from None


class Primitive:
    name = "?"
    # (input shapes, attrs) used by grad_check when no shapes are supplied
    example: tuple = ([[3, 4]], {})

    def check(self, *xs, **attrs):
        pass

    def forward(self, ctx, *xs, **attrs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, ctx, g, *xs, **attrs) -> tuple:
        raise NotImplementedError

    def sample(self, rng, shape) -> np.ndarray:
        return rng.normal(size=shape)

    def fail(self, xs, why: str):
        shapes = ", ".join(str(tuple(x.shape)) for x in xs)
        return ShapeError(f"{self.name}: {why} (input shapes {shapes})")


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class _Broadcasting(Primitive):
    example = ([[3, 4], [4]], {})

    def check(self, a, b, **attrs):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise self.fail((a, b), "shapes do not broadcast") from None


@register("add")
class Add(_Broadcasting):
    def forward(self, ctx, a, b):
        return a + b

    def backward(self, ctx, g, a, b):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


@register("sub")
class Sub(_Broadcasting):
    def forward(self, ctx, a, b):
        return a - b

    def backward(self, ctx, g, a, b):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)


@register("mul")
class Mul(_Broadcasting):
    def forward(self, ctx, a, b):
        return a * b

    def backward(self, ctx, g, a, b):
        return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


@register("matmul")
class MatMul(Primitive):
    example = ([[4, 3], [3, 5]], {})

    def check(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise self.fail((a, b), "expects two matrices")
        if a.shape[1] != b.shape[0]:
            raise self.fail((a, b), "inner dimensions differ")

    def forward(self, ctx, a, b):
        return a @ b

    def backward(self, ctx, g, a, b):
        return g @ b.T, a.T @ g


@register("bias_add")
class BiasAdd(Primitive):
    example = ([[2, 3, 4, 4], [3]], {"axis": 1})

    def check(self, x, b, axis=-1):
        if b.ndim != 1 or x.ndim == 0 or x.shape[axis] != b.shape[0]:
            raise self.fail((x, b), f"bias does not match axis {axis}")

    def _view(self, x, b, axis):
        shape = [1] * x.ndim
        shape[axis] = -1
        return b.reshape(shape)

    def forward(self, ctx, x, b, axis=-1):
        return x + self._view(x, b, axis)

    def backward(self, ctx, g, x, b, axis=-1):
        ax = axis % x.ndim
        others = tuple(i for i in range(x.ndim) if i != ax)
        return g, g.sum(axis=others)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


@register("conv2d")
class Conv2d(Primitive):
    """NCHW cross-correlation, weight (Cout, Cin, k, k)."""
    example = ([[1, 1, 8, 8], [4, 1, 3, 3]], {"stride": 1, "padding": 0})

    def check(self, x, w, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4:
            raise self.fail((x, w), "expects NCHW input and OIkk kernel")
        if x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
            raise self.fail((x, w), "channel mismatch or non-square kernel")
        if _conv_out(x.shape[2], w.shape[2], stride, padding) < 1:
            raise self.fail((x, w), "kernel larger than padded input")

    def forward(self, ctx, x, w, stride=1, padding=0):
        k = w.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        ho = _conv_out(x.shape[2], k, stride, padding)
        wo = _conv_out(x.shape[3], k, stride, padding)
        out = np.zeros((x.shape[0], w.shape[0], ho, wo))
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
        ctx.xp, ctx.ho, ctx.wo = xp, ho, wo
        return out

    def backward(self, ctx, g, x, w, stride=1, padding=0):
        k = w.shape[2]
        xp, ho, wo = ctx.xp, ctx.ho, ctx.wo
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xp[sl])
                gxp[sl] += np.einsum("nohw,oc->nchw", g, w[:, :, i, j])
        h, wd = x.shape[2], x.shape[3]
        return gxp[:, :, padding:padding + h, padding:padding + wd], gw


@register("conv_transpose2d")
class ConvTranspose2d(Primitive):
    """Gradient-of-conv2d layout, weight (Cin, Cout, k, k)."""
    example = ([[1, 2, 3, 3], [2, 3, 4, 4]], {"stride": 2, "padding": 1})

    def check(self, x, w, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4:
            raise self.fail((x, w), "expects NCHW input and IOkk kernel")
        if x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
            raise self.fail((x, w), "channel mismatch or non-square kernel")
        if (x.shape[2] - 1) * stride + w.shape[2] - 2 * padding < 1:
            raise self.fail((x, w), "padding removes the whole output")

    def forward(self, ctx, x, w, stride=1, padding=0):
        n, _, h, wd = x.shape
        k = w.shape[2]
        full = np.zeros((n, w.shape[1], (h - 1) * stride + k, (wd - 1) * stride + k))
        for i in range(k):
            for j in range(k):
                full[:, :, i:i + stride * h:stride, j:j + stride * wd:stride] += np.einsum(
                    "nchw,co->nohw", x, w[:, :, i, j])
        return full[:, :, padding:full.shape[2] - padding, padding:full.shape[3] - padding]

    def backward(self, ctx, g, x, w, stride=1, padding=0):
        h, wd = x.shape[2], x.shape[3]
        k = w.shape[2]
        gf = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        gx = np.zeros_like(x)
        gw = np.zeros_like(w)
        for i in range(k):
            for j in range(k):
                part = gf[:, :, i:i + stride * h:stride, j:j + stride * wd:stride]
                gx += np.einsum("nohw,co->nchw", part, w[:, :, i, j])
                gw[:, :, i, j] = np.einsum("nchw,nohw->co", x, part)
        return gx, gw


class _Unary(Primitive):
    example = ([[3, 4]], {})


@register("relu")
class ReLU(_Unary):
    def forward(self, ctx, x):
        return np.maximum(x, 0.0)

    def backward(self, ctx, g, x):
        return (g * (x > 0),)

    def sample(self, rng, shape):
        # keep away from the kink
        u = rng.normal(size=shape)
        return u + np.sign(u) * 0.1


@register("leaky_relu")
class LeakyReLU(_Unary):
    example = ([[3, 4]], {"slope": 0.2})

    def forward(self, ctx, x, slope=0.2):
        return np.where(x > 0, x, slope * x)

    def backward(self, ctx, g, x, slope=0.2):
        return (g * np.where(x > 0, 1.0, slope),)

    sample = ReLU.sample


@register("sigmoid")
class Sigmoid(_Unary):
    def forward(self, ctx, x):
        ctx.s = special.expit(x)
        return ctx.s

    def backward(self, ctx, g, x):
        return (g * ctx.s * (1.0 - ctx.s),)


@register("exp")
class Exp(_Unary):
    def forward(self, ctx, x):
        ctx.e = np.exp(x)
        return ctx.e

    def backward(self, ctx, g, x):
        return (g * ctx.e,)


@register("log")
class Log(_Unary):
    def forward(self, ctx, x):
        return np.log(x)

    def backward(self, ctx, g, x):
        return (g / x,)

    def sample(self, rng, shape):
        return rng.uniform(0.5, 2.0, size=shape)


@register("softplus")
class Softplus(_Unary):
    def forward(self, ctx, x):
        return np.logaddexp(0.0, x)

    def backward(self, ctx, g, x):
        return (g * special.expit(x),)


@register("softmax")
class Softmax(_Unary):
    example = ([[8]], {})

    def forward(self, ctx, x):
        ctx.s = special.softmax(x, axis=-1)
        return ctx.s

    def backward(self, ctx, g, x):
        s = ctx.s
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


@register("log_softmax")
class LogSoftmax(_Unary):
    example = ([[3, 5]], {})

    def forward(self, ctx, x):
        out = special.log_softmax(x, axis=-1)
        ctx.s = np.exp(out)
        return out

    def backward(self, ctx, g, x):
        return (g - ctx.s * g.sum(axis=-1, keepdims=True),)


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


@register("sum")
class Sum(_Unary):
    example = ([[3, 4]], {"axis": 1})

    def forward(self, ctx, x, axis=None, keepdims=False):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, ctx, g, x, axis=None, keepdims=False):
        return (_expand(g, x.shape, axis, keepdims),)


@register("mean")
class Mean(_Unary):
    example = ([[3, 4]], {"axis": 0})

    def forward(self, ctx, x, axis=None, keepdims=False):
        return np.mean(x, axis=axis, keepdims=keepdims)

    def backward(self, ctx, g, x, axis=None, keepdims=False):
        count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
        return (_expand(g, x.shape, axis, keepdims) / count,)


@register("reshape")
class Reshape(_Unary):
    example = ([[3, 4]], {"shape": (2, 6)})

    def check(self, x, shape=()):
        try:
            np.empty(x.shape).reshape(shape)
        except ValueError:
            raise self.fail((x,), f"cannot reshape to {tuple(shape)}") from None

    def forward(self, ctx, x, shape=()):
        return x.reshape(shape)

    def backward(self, ctx, g, x, shape=()):
        return (g.reshape(x.shape),)


@register("concat")
class Concat(Primitive):
    example = ([[2, 3], [2, 4]], {"axis": 1})

    def check(self, *xs, axis=0):
        if not xs:
            raise ShapeError("concat: no inputs")
        ref = list(xs[0].shape)
        for x in xs[1:]:
            other = list(x.shape)
            if len(other) != len(ref):
                raise self.fail(xs, "ranks differ")
            ref[axis] = other[axis]
            if other != ref:
                raise self.fail(xs, f"shapes differ off axis {axis}")

    def forward(self, ctx, *xs, axis=0):
        return np.concatenate(xs, axis=axis)

    def backward(self, ctx, g, *xs, axis=0):
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=axis))


@register("slice")
class Slice(_Unary):
    example = ([[3, 6]], {"start": 1, "stop": 4, "axis": 1})

    def check(self, x, start=0, stop=None, axis=-1):
        if x.ndim == 0:
            raise self.fail((x,), "cannot slice a scalar")

    def _index(self, x, start, stop, axis):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        return tuple(idx)

    def forward(self, ctx, x, start=0, stop=None, axis=-1):
        return x[self._index(x, start, stop, axis)].copy()

    def backward(self, ctx, g, x, start=0, stop=None, axis=-1):
        gx = np.zeros_like(x)
        gx[self._index(x, start, stop, axis)] = g
        return (gx,)


# ===== Evaluation =====
def apply(name: str, *inputs, **attrs) -> Tensor:
    prim = get_primitive(name)
    ts = [as_tensor(x) for x in inputs]
    arrays = [t.data for t in ts]
    prim.check(*arrays, **attrs)
    ctx = SimpleNamespace()
    out = Tensor(prim.forward(ctx, *arrays, **attrs))
    if _grad_enabled() and any(t.requires_grad for t in ts):
        out.requires_grad = True
        out.node = Node(prim, ts, attrs, ctx, out)
        graph = _active_graph()
        if graph is not None:
            graph.nodes.append(out.node)
    return out


@contextmanager
def recording(graph: Graph):
    prev = _active_graph()
    _state.graph = graph
    try:
        yield graph
    finally:
        _state.graph = prev


def forward(graph: Graph, inputs: dict) -> dict:
    """Run ``graph.fn`` on named inputs, recording a fresh tape."""
    graph.nodes = []
    with recording(graph):
        out = graph.fn(**inputs)
    if isinstance(out, Tensor):
        out = {"out": out}
    graph.outputs = dict(out)
    return graph.outputs


def _toposort(root: Tensor) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if t.node is None:
            continue
        if done:
            order.append(t.node)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            if inp.node is not None and id(inp) not in seen:
                stack.append((inp, False))
    return order


def backward(loss: Tensor, graph: Graph | None = None) -> dict:
    """Accumulate d loss / d t into ``t.grad`` for every tensor the loss depends on.

    Returns a mapping leaf tensor -> gradient array.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is not None:
        if loss.node is not None and loss.node not in graph.nodes:
            raise GraphError(f"loss was not produced by graph '{graph.name}'")
        nodes = graph.nodes
    else:
        nodes = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    touched = {id(loss): loss}
    for node in reversed(nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        arrays = [t.data for t in node.inputs]
        parts = node.primitive.backward(node.ctx, g, *arrays, **node.attrs)
        for inp, gi in zip(node.inputs, parts):
            if not inp.requires_grad or gi is None:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            touched[key] = inp
    leaves = {}
    for key, t in touched.items():
        if t.requires_grad:
            t.grad = grads[key]
            if t.node is None:
                leaves[t] = t.grad
    return leaves


def grad_check(primitive: str, shapes=None, trials: int = 10, h: float = 1e-5, rng=None, **attrs) -> float:
    """Max over trials of |analytic - numeric| / max(1, |numeric|) for one primitive."""
    if h <= 0:
        raise ValueError("h must be positive")
    prim = get_primitive(primitive)
    if shapes is None:
        shapes, defaults = prim.example
        attrs = {**defaults, **attrs}
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for _ in range(trials):
        arrays = [prim.sample(rng, tuple(s)) for s in shapes]
        probe = rng.normal(size=prim.forward(SimpleNamespace(), *arrays, **attrs).shape)

        def objective(*xs):
            return float(np.sum(prim.forward(SimpleNamespace(), *xs, **attrs) * probe))

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        loss = apply("sum", apply("mul", apply(primitive, *leaves, **attrs), probe))
        backward(loss)
        for k, leaf in enumerate(leaves):
            numeric = np.zeros_like(arrays[k])
            for idx in np.ndindex(arrays[k].shape):
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[k][idx] += h
                minus[k][idx] -= h
                numeric[idx] = (objective(*plus) - objective(*minus)) / (2 * h)
            err = np.abs(leaf.grad - numeric) / np.maximum(1.0, np.abs(numeric))
            worst = max(worst, float(err.max(initial=0.0)))
    logger.debug("grad_check %s: %.3e", primitive, worst)
    return worst


# ===== Convenience wrappers =====
def relu(x): return apply("relu", x)
def leaky_relu(x, slope=0.2): return apply("leaky_relu", x, slope=slope)
def sigmoid(x): return apply("sigmoid", x)
def exp(x): return apply("exp", x)
def log(x): return apply("log", x)
def softplus(x): return apply("softplus", x)
def softmax(x): return apply("softmax", x)
def log_softmax(x): return apply("log_softmax", x)
def concat(xs, axis=0): return apply("concat", *xs, axis=axis)
def slice_(x, start, stop, axis=-1): return apply("slice", x, start=start, stop=stop, axis=axis)
