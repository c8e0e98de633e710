"""Dense float64 numerics with tape-based reverse-mode differentiation.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  A :class:`Graph`
records every primitive applied to its nodes, in creation order, so the tape
is already topologically sorted.  :func:`backward` walks it in reverse and
returns vector-Jacobian products for every parameter and every input node
marked with ``requires_grad``.

The kernel set is small on purpose: dense, 3x3 "same" convolution, 2x2 max
pooling, elementwise nonlinearities and arithmetic, concatenation, reshaping,
means, a per-sequence time reversal and two fused recurrent layers (LSTM and
GRU) whose backward passes are written out by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Parameter",
    "Node",
    "Graph",
    "backward",
    "primitive",
    "make_rng",
    "derive_seed",
    "glorot_uniform",
    "sigmoid",
    "sigmoid_array",
    "relu",
    "tanh",
    "add",
    "sub",
    "mul",
    "scale",
    "dense",
    "conv2d",
    "maxpool2",
    "concat",
    "reshape",
    "mean",
    "total",
    "take_column",
    "reverse_time",
    "lstm_layer",
    "gru_layer",
    "GradCheckReport",
    "grad_check",
    "rmsprop_step",
    "NumericError",
]


class NumericError(ArithmeticError):
    """Raised when a value or gradient stops being finite."""


# --------------------------------------------------------------------------
# random numbers

def derive_seed(seed: int, *path: int | str) -> np.random.SeedSequence:
    """Child seed for ``path`` under ``seed``; independent of call order."""
    key = []
    for p in path:
        if isinstance(p, str):
            # stable across processes, unlike hash()
            p = int.from_bytes(p.encode("utf-8")[:8].ljust(8, b"\0"), "little") ^ len(p)
        key.append(int(p) & 0xFFFFFFFF)
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key))


def make_rng(seed: int, *path: int | str) -> np.random.Generator:
    """Counter-based (Philox) generator, splittable through ``path``."""
    return np.random.Generator(np.random.Philox(derive_seed(seed, *path)))


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# --------------------------------------------------------------------------
# parameters and graph

class Parameter:
    """Trainable array with its RMSProp accumulator."""

    __slots__ = ("name", "value", "sq_avg")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.sq_avg = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def copy(self) -> "Parameter":
        p = Parameter(self.value.copy(), self.name)
        p.sq_avg = self.sq_avg.copy()
        return p

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


VJP = Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]]


class Node:
    __slots__ = ("graph", "value", "parents", "vjp", "index", "param", "requires_grad")

    def __init__(self, graph: "Graph", value: np.ndarray, parents: tuple["Node", ...],
                 vjp: VJP | None, requires_grad: bool, param: Parameter | None = None):
        self.graph = graph
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.param = param
        self.index = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(#{self.index}, shape={self.value.shape})"


class Graph:
    """Append-only tape of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._params: dict[int, Node] = {}

    def input(self, value, requires_grad: bool = False) -> Node:
        return Node(self, np.asarray(value, dtype=np.float64), (), None, requires_grad)

    def param(self, p: Parameter) -> Node:
        node = self._params.get(id(p))
        if node is None:
            node = Node(self, p.value, (), None, True, param=p)
            self._params[id(p)] = node
        return node

    def release(self) -> None:
        """Drop the tape.

        Nodes point back at their graph, so a tape is a reference cycle and
        would otherwise wait for the cycle collector, which counts objects
        rather than bytes. Large activations then pile up across batches.
        """
        self.nodes.clear()
        self._params.clear()


def primitive(value: np.ndarray, parents: Sequence[Node], vjp: VJP) -> Node:
    """Register ``value`` as the output of a primitive on its parents' graph.

    ``vjp(g, needs)`` receives the output cotangent and a tuple flagging which
    parents need a gradient; it returns one array (or None) per parent.
    """
    parents = tuple(parents)
    graph = parents[0].graph
    if not np.all(np.isfinite(value)):
        raise NumericError("non-finite value produced by a primitive")
    rg = any(p.requires_grad for p in parents)
    return Node(graph, value, parents, vjp if rg else None, rg)


def backward(graph: Graph, output: Node, seed) -> dict:
    """Vector-Jacobian product of ``output`` weighted by ``seed``.

    Returns a dict mapping each :class:`Parameter` reached (and each input
    :class:`Node` created with ``requires_grad=True``) to
    ``sum_i dO_i/dI_j * seed_i``.
    """
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.value.shape:
        raise ValueError(f"seed shape {seed.shape} != output shape {output.value.shape}")
    grads: dict[int, np.ndarray] = {output.index: seed}
    result: dict = {}
    nodes = graph.nodes
    for i in range(output.index, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        if not node.parents:
            if node.param is not None:
                result[node.param] = g
            elif node.requires_grad:
                result[node] = g
            continue
        if node.vjp is None:
            continue
        needs = tuple(p.requires_grad for p in node.parents)
        pg = node.vjp(g, needs)
        for parent, gp, need in zip(node.parents, pg, needs):
            if not need or gp is None:
                continue
            j = parent.index
            if j in grads:
                grads[j] = grads[j] + gp
            else:
                grads[j] = gp
    return result


# --------------------------------------------------------------------------
# elementwise kernels

def sigmoid_array(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    out = np.empty_like(y)
    pos = y >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-y[pos]))
    e = np.exp(y[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _fast_sigmoid(y: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * y))


def sigmoid(y: Node) -> Node:
    s = sigmoid_array(y.value)
    return primitive(s, (y,), lambda g, n: (g * s * (1.0 - s),))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return primitive(np.where(mask, x.value, 0.0), (x,), lambda g, n: (g * mask,))


def tanh(x: Node) -> Node:
    t = np.tanh(x.value)
    return primitive(t, (x,), lambda g, n: (g * (1.0 - t * t),))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return primitive(a.value + b.value, (a, b),
                     lambda g, n: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return primitive(a.value - b.value, (a, b),
                     lambda g, n: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value

    def vjp(g, n):
        return (_unbroadcast(g * bv, av.shape) if n[0] else None,
                _unbroadcast(g * av, bv.shape) if n[1] else None)

    return primitive(av * bv, (a, b), vjp)


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return primitive(x.value * c, (x,), lambda g, n: (g * c,))


# --------------------------------------------------------------------------
# structural kernels

def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    values = [n.value for n in nodes]
    ax = axis % values[0].ndim
    sizes = np.cumsum([v.shape[ax] for v in values])[:-1]

    def vjp(g, n):
        return tuple(np.split(g, sizes, axis=ax))

    return primitive(np.concatenate(values, axis=ax), nodes, vjp)


def reshape(x: Node, shape: tuple[int, ...]) -> Node:
    src = x.shape
    return primitive(x.value.reshape(shape), (x,), lambda g, n: (g.reshape(src),))


def mean(x: Node, axis) -> Node:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.value.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    src = x.shape

    def vjp(g, n):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, src).copy(),)

    return primitive(x.value.mean(axis=axes), (x,), vjp)


def total(x: Node) -> Node:
    src = x.shape
    return primitive(np.asarray(x.value.sum()), (x,), lambda g, n: (np.full(src, float(g)),))


def take_column(x: Node, j: int) -> Node:
    src = x.shape

    def vjp(g, n):
        out = np.zeros(src)
        out[..., j] = g
        return (out,)

    return primitive(x.value[..., j].copy(), (x,), vjp)


def _reverse_index(lengths: np.ndarray, steps: int) -> np.ndarray:
    t = np.arange(steps)[None, :]
    lens = np.asarray(lengths)[:, None]
    return np.where(t < lens, lens - 1 - t, t)


def reverse_time(x: Node, lengths: Sequence[int] | None = None) -> Node:
    """Reverse axis 1 of a ``(batch, time, features)`` tensor within each valid length."""
    B, T = x.shape[:2]
    if lengths is None:
        lengths = np.full(B, T)
    idx = _reverse_index(np.asarray(lengths), T)
    rows = np.arange(B)[:, None]

    def vjp(g, n):
        return (g[rows, idx],)

    return primitive(x.value[rows, idx], (x,), vjp)


# --------------------------------------------------------------------------
# layers

def dense(x: Node, w: Node, b: Node | None = None) -> Node:
    """Affine map over the last axis: ``x @ w + b``."""
    xv, wv = x.value, w.value
    out = xv @ wv
    if b is not None:
        out = out + b.value

    def vjp(g, n):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wv.T) if n[0] else None
        gw = (xv.reshape(-1, xv.shape[-1]).T @ g2) if n[1] else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return primitive(out, parents, vjp)


def _im2col(xp: np.ndarray, k: int, H: int, W: int) -> np.ndarray:
    cols = [xp[:, dy:dy + H, dx:dx + W, :] for dy in range(k) for dx in range(k)]
    return np.concatenate(cols, axis=-1)


def conv2d(x: Node, w: Node, b: Node) -> Node:
    """Stride-1 convolution with zero "same" padding.

    ``x`` is ``(N, H, W, Cin)``, ``w`` is ``(k, k, Cin, Cout)`` with odd ``k``.
    """
    xv, wv = x.value, w.value
    k = wv.shape[0]
    pad = k // 2
    N, H, W, Cin = xv.shape
    Cout = wv.shape[-1]
    xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = _im2col(xp, k, H, W)
    wm = wv.reshape(k * k * Cin, Cout)
    out = cols @ wm + b.value

    def vjp(g, n):
        gx = gw = None
        if n[1]:
            gw = (cols.reshape(-1, k * k * Cin).T @ g.reshape(-1, Cout)).reshape(wv.shape)
        if n[0]:
            gcols = g @ wm.T
            gxp = np.zeros_like(xp)
            c = 0
            for dy in range(k):
                for dx in range(k):
                    gxp[:, dy:dy + H, dx:dx + W, :] += gcols[..., c:c + Cin]
                    c += Cin
            gx = gxp[:, pad:pad + H, pad:pad + W, :]
        gb = g.reshape(-1, Cout).sum(axis=0) if n[2] else None
        return gx, gw, gb

    return primitive(out, (x, w, b), vjp)


def maxpool2(x: Node) -> Node:
    """2x2 max pooling, stride 2; spatial extents must be even."""
    xv = x.value
    N, H, W, C = xv.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {H}x{W}")
    blocks = xv.reshape(N, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(N, H // 2, W // 2, C, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g, n):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(N, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(N, H, W, C)
        return (gx,)

    return primitive(out, (x,), vjp)


# --------------------------------------------------------------------------
# recurrent layers
#
# x is (batch, time, features); state starts at zero; outputs the hidden
# sequence (batch, time, width).  Gate layout in the packed matrices:
# LSTM [input | forget | candidate | output], GRU [update | reset | candidate].

def lstm_layer(x: Node, wx: Node, wh: Node, b: Node) -> Node:
    xv, Wx, Wh, bv = x.value, wx.value, wh.value, b.value
    B, T, _ = xv.shape
    C = Wh.shape[0]
    xw = np.ascontiguousarray((xv @ Wx + bv).transpose(1, 0, 2))  # (T, B, 4C)
    gates = np.empty((T, B, 4 * C))
    cs = np.empty((T + 1, B, C))
    hs = np.empty((T + 1, B, C))
    tcs = np.empty((T, B, C))
    cs[0] = 0.0
    hs[0] = 0.0
    for t in range(T):
        a = xw[t] + hs[t] @ Wh
        s = gates[t]
        s[:, :2 * C] = _fast_sigmoid(a[:, :2 * C])
        s[:, 2 * C:3 * C] = np.tanh(a[:, 2 * C:3 * C])
        s[:, 3 * C:] = _fast_sigmoid(a[:, 3 * C:])
        cs[t + 1] = s[:, C:2 * C] * cs[t] + s[:, :C] * s[:, 2 * C:3 * C]
        tcs[t] = np.tanh(cs[t + 1])
        hs[t + 1] = s[:, 3 * C:] * tcs[t]
    out = np.ascontiguousarray(hs[1:].transpose(1, 0, 2))

    def vjp(g, n):
        gT = g.transpose(1, 0, 2)
        da_all = np.empty((T, B, 4 * C))
        dh = np.zeros((B, C))
        dc = np.zeros((B, C))
        gWh = np.zeros_like(Wh)
        for t in range(T - 1, -1, -1):
            s = gates[t]
            i, f, gg, o = s[:, :C], s[:, C:2 * C], s[:, 2 * C:3 * C], s[:, 3 * C:]
            dh = dh + gT[t]
            tc = tcs[t]
            dc = dc + dh * o * (1.0 - tc * tc)
            da = da_all[t]
            da[:, :C] = dc * gg * i * (1.0 - i)
            da[:, C:2 * C] = dc * cs[t] * f * (1.0 - f)
            da[:, 2 * C:3 * C] = dc * i * (1.0 - gg * gg)
            da[:, 3 * C:] = dh * tc * o * (1.0 - o)
            gWh += hs[t].T @ da
            dh = da @ Wh.T
            dc = dc * f
        flat = da_all.transpose(1, 0, 2).reshape(B * T, 4 * C)
        gx = (flat @ Wx.T).reshape(B, T, -1) if n[0] else None
        gWx = xv.reshape(B * T, -1).T @ flat if n[1] else None
        return gx, gWx, gWh, flat.sum(axis=0)

    return primitive(out, (x, wx, wh, b), vjp)


def gru_layer(x: Node, wx: Node, wh: Node, b: Node) -> Node:
    xv, Wx, Wh, bv = x.value, wx.value, wh.value, b.value
    B, T, _ = xv.shape
    C = Wh.shape[0]
    Wzr, Wn = Wh[:, :2 * C], Wh[:, 2 * C:]
    xw = np.ascontiguousarray((xv @ Wx + bv).transpose(1, 0, 2))
    zr = np.empty((T, B, 2 * C))
    ns = np.empty((T, B, C))
    hs = np.empty((T + 1, B, C))
    hs[0] = 0.0
    for t in range(T):
        h = hs[t]
        zr[t] = _fast_sigmoid(xw[t, :, :2 * C] + h @ Wzr)
        z, r = zr[t, :, :C], zr[t, :, C:]
        ns[t] = np.tanh(xw[t, :, 2 * C:] + (r * h) @ Wn)
        hs[t + 1] = (1.0 - z) * ns[t] + z * h
    out = np.ascontiguousarray(hs[1:].transpose(1, 0, 2))

    def vjp(g, n):
        gT = g.transpose(1, 0, 2)
        da_all = np.empty((T, B, 3 * C))
        dh = np.zeros((B, C))
        gWzr = np.zeros_like(Wzr)
        gWn = np.zeros_like(Wn)
        for t in range(T - 1, -1, -1):
            h = hs[t]
            z, r = zr[t, :, :C], zr[t, :, C:]
            nn_ = ns[t]
            dh = dh + gT[t]
            da = da_all[t]
            dan = dh * (1.0 - z) * (1.0 - nn_ * nn_)
            da[:, 2 * C:] = dan
            drh = dan @ Wn.T
            da[:, :C] = dh * (h - nn_) * z * (1.0 - z)
            da[:, C:2 * C] = drh * h * r * (1.0 - r)
            gWn += (r * h).T @ dan
            gWzr += h.T @ da[:, :2 * C]
            dh = dh * z + drh * r + da[:, :2 * C] @ Wzr.T
        flat = da_all.transpose(1, 0, 2).reshape(B * T, 3 * C)
        gx = (flat @ Wx.T).reshape(B, T, -1) if n[0] else None
        gWx = xv.reshape(B * T, -1).T @ flat if n[1] else None
        return gx, gWx, np.concatenate([gWzr, gWn], axis=1), flat.sum(axis=0)

    return primitive(out, (x, wx, wh, b), vjp)


# --------------------------------------------------------------------------
# verification

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def grad_check(fn: Callable[[Node], Node], point, step: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare the tape gradient of scalar ``fn`` with central differences.

    The discrepancy is ``max|analytic - numeric| / max|numeric|`` (infinity
    norms), which stays meaningful for entries that are exactly zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=np.float64)

    def value_at(p: np.ndarray) -> float:
        g = Graph()
        out = fn(g.input(p))
        v = float(np.sum(out.value))
        g.release()
        if not math.isfinite(v):
            raise NumericError("non-finite function value during grad_check")
        return v

    g = Graph()
    x = g.input(point, requires_grad=True)
    out = fn(x)
    if out.value.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(out.value)):
        raise NumericError("non-finite function value during grad_check")
    grads = backward(g, out, np.ones_like(out.value))
    analytic = grads.get(x, np.zeros_like(point))

    numeric = np.empty_like(point)
    flat = point.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = value_at(point)
        flat[i] = orig - step
        fm = value_at(point)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * step)
    scale_ = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-300)
    err = float(np.max(np.abs(analytic - numeric)) / scale_)
    return GradCheckReport(err, tol, analytic, numeric)


# --------------------------------------------------------------------------
# optimizer

def rmsprop_step(params: Iterable[Parameter], grads: dict, lr: float, decay_rate: float = 0.9,
                 epsilon: float = 1e-8) -> None:
    """In-place RMSProp: ``s <- rho*s + (1-rho)*g^2``; ``theta -= lr*g/sqrt(s+eps)``."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if not 0 < decay_rate < 1:
        raise ValueError("decay_rate must lie in (0, 1)")
    params = list(params)
    for p in params:
        g = grads.get(p)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {p.name or 'parameter'}")
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        p.sq_avg *= decay_rate
        p.sq_avg += (1.0 - decay_rate) * g * g
        p.value -= lr * g / np.sqrt(p.sq_avg + epsilon)
