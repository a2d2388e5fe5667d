"""Dense float32 tensors on an append-only reverse-mode autodiff tape.

Values are plain C-contiguous float32 ``numpy.ndarray``s and are treated as
immutable once recorded. A :class:`Graph` is a tape of nodes; ``Var`` is a
lightweight handle (graph, node index). The backward pass walks the tape
once in reverse, so a graph with N nodes performs exactly N node visits.

Graphs are single-use and confined to one thread; parameter leaves
accumulate their gradients into the owning :class:`~festa.params.ParamSet`.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels as K


class TensorError(Exception):
    """Base class for tensor and graph failures."""


class DimensionError(TensorError):
    pass


class NumericsError(TensorError):
    """A forward op produced NaN/Inf from finite inputs."""


class GraphError(TensorError):
    pass


_CHECK_FINITE = os.environ.get("FESTA_CHECK_FINITE", "1") != "0"


def as_f32(value) -> np.ndarray:
    """Coerce to a C-contiguous float32 array (the engine's only dtype)."""
    return np.ascontiguousarray(value, dtype=np.float32)


class Node:
    __slots__ = ("op", "value", "bwd", "param_set", "param_name", "keep_grad", "grad")

    def __init__(self, op, value, bwd=None, param_set=None, param_name=None, keep_grad=False):
        self.op = op
        self.value = value
        self.bwd = bwd
        self.param_set = param_set
        self.param_name = param_name
        self.keep_grad = keep_grad
        self.grad = None


class Var:
    """Handle to one node of a Graph."""

    __slots__ = ("graph", "i")

    def __init__(self, graph: "Graph", i: int):
        self.graph = graph
        self.i = i

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.i].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray | None:
        return self.graph.nodes[self.i].grad

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __repr__(self):
        return f"Var(op={self.graph.nodes[self.i].op!r}, shape={self.value.shape})"


class Graph:
    """Append-only op tape with reverse-mode backward."""

    def __init__(self, check_finite: bool | None = None):
        self.nodes: list[Node] = []
        self.check_finite = _CHECK_FINITE if check_finite is None else check_finite
        self.last_backward_visits = 0

    def __len__(self):
        return len(self.nodes)

    def _emit(self, op: str, value: np.ndarray, bwd=None, **kw) -> Var:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericsError(f"non-finite values produced by op {op!r}")
        self.nodes.append(Node(op, value, bwd, **kw))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, *, keep_grad: bool = False) -> Var:
        """Record an input leaf; set keep_grad to read its gradient later."""
        return self._emit("leaf", as_f32(value), keep_grad=keep_grad)

    def constant(self, value) -> Var:
        """Record a value that never receives a gradient."""
        return self._emit("const", as_f32(value))

    def param(self, param_set, name: str) -> Var:
        """Record a trainable leaf bound to a ParamSet entry."""
        return self._emit("param", param_set.value(name),
                          param_set=param_set, param_name=name)

    def backward(self, loss: Var) -> None:
        """Backpropagate from a scalar loss (size-1 tensor)."""
        if loss.graph is not self:
            raise GraphError("loss belongs to a different graph")
        if loss.value.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.value.shape}")
        self.backward_seeded([(loss, np.ones_like(loss.value))])

    def backward_seeded(self, seeds: Sequence[tuple[Var, np.ndarray]]) -> None:
        """Backward pass seeded with explicit output gradients.

        Used at the split boundaries, where the upstream gradient arrives
        over the wire instead of from a local loss node.
        """
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        for var, g in seeds:
            if var.graph is not self:
                raise GraphError("seed var belongs to a different graph")
            g = as_f32(g)
            if g.shape != var.value.shape:
                raise DimensionError(
                    f"seed gradient shape {g.shape} != value shape {var.value.shape}")
            grads[var.i] = g if grads[var.i] is None else grads[var.i] + g
        visits = 0
        for i in range(len(self.nodes) - 1, -1, -1):
            visits += 1
            node = self.nodes[i]
            g = grads[i]
            if g is None:
                continue
            if node.bwd is not None:
                for j, contrib in node.bwd(g):
                    grads[j] = contrib if grads[j] is None else grads[j] + contrib
            else:
                if node.param_set is not None:
                    node.param_set.accumulate_grad(node.param_name, g)
                if node.keep_grad:
                    node.grad = g.copy()
            grads[i] = None  # non-leaf gradients are discarded after use
        self.last_backward_visits = visits


def _same_graph(*vars_: Var) -> Graph:
    g = vars_[0].graph
    for v in vars_[1:]:
        if v.graph is not g:
            raise GraphError("operands recorded on different graphs")
    return g


def _binary_setup(op: str, a: Var, b: Var):
    """Validate equal shapes or a trailing-vector broadcast; return mode."""
    g = _same_graph(a, b)
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        return g, "same"
    if bv.ndim == 1 and av.ndim >= 1 and av.shape[-1] == bv.shape[0]:
        return g, "vec"
    raise DimensionError(f"{op}: incompatible shapes {av.shape} and {bv.shape}")


def _reduce_to_vec(grad: np.ndarray) -> np.ndarray:
    """Sum a broadcast gradient back to trailing-vector shape."""
    if grad.ndim == 1:
        return grad
    return grad.reshape(-1, grad.shape[-1]).sum(axis=0)


def add(a: Var, b: Var) -> Var:
    g, mode = _binary_setup("add", a, b)
    ai, bi = a.i, b.i
    if mode == "same":
        bwd = lambda go: ((ai, go), (bi, go))
    else:
        bwd = lambda go: ((ai, go), (bi, _reduce_to_vec(go)))
    return g._emit("add", a.value + b.value, bwd)


def sub(a: Var, b: Var) -> Var:
    g, mode = _binary_setup("sub", a, b)
    ai, bi = a.i, b.i
    if mode == "same":
        bwd = lambda go: ((ai, go), (bi, -go))
    else:
        bwd = lambda go: ((ai, go), (bi, -_reduce_to_vec(go)))
    return g._emit("sub", a.value - b.value, bwd)


def mul(a: Var, b: Var) -> Var:
    g, mode = _binary_setup("mul", a, b)
    ai, bi = a.i, b.i
    av, bv = a.value, b.value
    if mode == "same":
        bwd = lambda go: ((ai, go * bv), (bi, go * av))
    else:
        bwd = lambda go: ((ai, go * bv), (bi, _reduce_to_vec(go * av)))
    return g._emit("mul", av * bv, bwd)


def div(a: Var, b: Var) -> Var:
    g, mode = _binary_setup("div", a, b)
    ai, bi = a.i, b.i
    av, bv = a.value, b.value
    if mode == "same":
        bwd = lambda go: ((ai, go / bv), (bi, -go * av / (bv * bv)))
    else:
        bwd = lambda go: ((ai, go / bv), (bi, _reduce_to_vec(-go * av / (bv * bv))))
    return g._emit("div", av / bv, bwd)


def scale(a: Var, s: float) -> Var:
    sf = np.float32(s)
    ai = a.i
    return a.graph._emit("scale", a.value * sf, lambda go: ((ai, go * sf),))


def neg(a: Var) -> Var:
    return scale(a, -1.0)


def matmul(a: Var, b: Var) -> Var:
    g = _same_graph(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    ai, bi = a.i, b.i

    def bwd(go):
        return ((ai, K.matmul_nt(go, bv)), (bi, K.matmul_tn(av, go)))

    return g._emit("matmul", K.matmul(av, bv), bwd)


def matmul_t(a: Var, b: Var) -> Var:
    """a @ b.T — used for attention scores without materializing transposes."""
    g = _same_graph(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise DimensionError(f"matmul_t: incompatible shapes {av.shape} and {bv.shape}")
    ai, bi = a.i, b.i

    def bwd(go):
        return ((ai, K.matmul(go, bv)), (bi, K.matmul_tn(go, av)))

    return g._emit("matmul_t", K.matmul_nt(av, bv), bwd)


def gelu(a: Var) -> Var:
    av = a.value
    ai = a.i
    return a.graph._emit("gelu", K.gelu(av), lambda go: ((ai, K.gelu_grad(av, go)),))


def relu(a: Var) -> Var:
    av = a.value
    ai = a.i
    mask = (av > 0).astype(np.float32)
    return a.graph._emit("relu", av * mask, lambda go: ((ai, go * mask),))


def sigmoid(a: Var) -> Var:
    av = a.value
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ev = np.exp(av[~pos])
    out[~pos] = ev / (1.0 + ev)
    ai = a.i
    return a.graph._emit("sigmoid", out, lambda go: ((ai, go * out * (1.0 - out)),))


LOG_CLAMP = np.float32(1e-7)


def log(a: Var) -> Var:
    """Natural log with inputs clamped at 1e-7 (loss-safe)."""
    av = a.value
    clamped = np.maximum(av, LOG_CLAMP)
    ai = a.i

    def bwd(go):
        dx = np.where(av > LOG_CLAMP, go / clamped, np.float32(0.0))
        return ((ai, dx.astype(np.float32)),)

    return a.graph._emit("log", np.log(clamped), bwd)


def softmax(a: Var, axis: int = -1) -> Var:
    av = a.value
    ax = axis if axis >= 0 else av.ndim + axis
    if not 0 <= ax < av.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {av.shape}")
    moved = np.ascontiguousarray(np.moveaxis(av, ax, -1))
    rows = moved.reshape(-1, moved.shape[-1])
    y2 = K.softmax2d(rows)
    out = np.moveaxis(y2.reshape(moved.shape), -1, ax)
    out = np.ascontiguousarray(out)
    ai = a.i

    def bwd(go):
        go2 = np.ascontiguousarray(np.moveaxis(go, ax, -1)).reshape(rows.shape)
        dx2 = K.softmax2d_grad(y2, go2)
        dx = np.moveaxis(dx2.reshape(moved.shape), -1, ax)
        return ((ai, np.ascontiguousarray(dx)),)

    return a.graph._emit("softmax", out, bwd)


def layernorm(a: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    g = _same_graph(a, gain, bias)
    av, gv, bv = a.value, gain.value, bias.value
    d = av.shape[-1]
    if gv.shape != (d,) or bv.shape != (d,):
        raise DimensionError(
            f"layernorm: gain/bias {gv.shape}/{bv.shape} must match last dim {d}")
    rows = av.reshape(-1, d)
    y2, xhat, inv = K.layernorm2d(rows, gv, bv, eps)
    ai, gi, bi = a.i, gain.i, bias.i

    def bwd(go):
        go2 = go.reshape(-1, d)
        dx2, dgain, dbias = K.layernorm2d_grad(xhat, inv, gv, go2)
        return ((ai, dx2.reshape(av.shape)), (gi, dgain), (bi, dbias))

    return g._emit("layernorm", y2.reshape(av.shape), bwd)


def reshape(a: Var, shape: Sequence[int]) -> Var:
    av = a.value
    new = np.ascontiguousarray(av.reshape(shape))
    ai = a.i
    old_shape = av.shape
    return a.graph._emit("reshape", new,
                         lambda go: ((ai, np.ascontiguousarray(go.reshape(old_shape))),))


def narrow(a: Var, axis: int, start: int, length: int) -> Var:
    av = a.value
    ax = axis if axis >= 0 else av.ndim + axis
    if not 0 <= ax < av.ndim or start < 0 or start + length > av.shape[ax]:
        raise DimensionError(
            f"narrow: [{start}:{start + length}) on axis {axis} of shape {av.shape}")
    idx = tuple(slice(None) if k != ax else slice(start, start + length)
                for k in range(av.ndim))
    ai = a.i

    def bwd(go):
        full = np.zeros_like(av)
        full[idx] = go
        return ((ai, full),)

    return a.graph._emit("narrow", np.ascontiguousarray(av[idx]), bwd)


def concat(parts: Iterable[Var], axis: int = 0) -> Var:
    parts = list(parts)
    g = _same_graph(*parts)
    values = [p.value for p in parts]
    out = np.ascontiguousarray(np.concatenate(values, axis=axis))
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)
    ids = [p.i for p in parts]
    ndim = out.ndim
    ax = axis if axis >= 0 else ndim + axis

    def bwd(go):
        outs = []
        for pid, lo, hi in zip(ids, offsets[:-1], offsets[1:]):
            idx = tuple(slice(None) if k != ax else slice(lo, hi) for k in range(ndim))
            outs.append((pid, np.ascontiguousarray(go[idx])))
        return tuple(outs)

    return g._emit("concat", out, bwd)


def sum_all(a: Var) -> Var:
    av = a.value
    ai = a.i
    out = np.array([av.sum()], dtype=np.float32)
    return a.graph._emit("sum", out, lambda go: ((ai, np.full_like(av, go[0])),))


def mean_all(a: Var) -> Var:
    return scale(sum_all(a), 1.0 / a.value.size)


def huber(a: Var, target: np.ndarray, delta: float = 1.0) -> Var:
    """Elementwise smooth-L1 against a constant target."""
    av = a.value
    t = as_f32(target)
    if t.shape != av.shape:
        raise DimensionError(f"huber: target {t.shape} != input {av.shape}")
    d = av - t
    absd = np.abs(d)
    quad = absd < delta
    out = np.where(quad, np.float32(0.5) * d * d,
                   np.float32(delta) * (absd - np.float32(0.5 * delta)))
    ai = a.i

    def bwd(go):
        return ((ai, go * np.clip(d, -delta, delta).astype(np.float32)),)

    return a.graph._emit("huber", out.astype(np.float32), bwd)
