"""Minimal define-by-run reverse-mode differentiation on numpy arrays.

Every operation on a :class:`Tensor` that belongs to a :class:`Graph` is
recorded on that graph's tape.  Tensors without a graph are constants and
record nothing, which is what inference over frozen weights uses.

All arithmetic is float64.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NumericError(FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class Tensor:
    __slots__ = ("data", "graph", "node")

    def __init__(self, data, graph: "Graph | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = "const" if self.graph is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {tag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    parents: tuple
    backward: Callable | None
    param: str | None = None


class Graph:
    """Tape of recorded primitive ops, in creation (topological) order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[str, Tensor] = {}
        self._store: ParamStore | None = None

    def __len__(self):
        return len(self.nodes)

    def param(self, store: "ParamStore", name: str) -> Tensor:
        """Leaf tensor bound to a store entry; one leaf per name per graph."""
        if self._store is None:
            self._store = store
        elif self._store is not store:
            raise ValueError("a graph can only bind one ParamStore")
        leaf = self._leaves.get(name)
        if leaf is None:
            entry = store[name]
            self.nodes.append(_Node((), None, name))
            leaf = Tensor(entry.value, self, len(self.nodes) - 1)
            self._leaves[name] = leaf
        return leaf

    def input(self, data) -> Tensor:
        """Leaf tensor that is differentiable but not a stored weight."""
        self.nodes.append(_Node((), None, None))
        return Tensor(data, self, len(self.nodes) - 1)

    def backward(self, loss: Tensor, store: "ParamStore | None" = None) -> list:
        return grad_backward(self, loss, store)

    def free(self):
        self.nodes.clear()
        self._leaves.clear()


def bind(graph: Graph | None, store: "ParamStore", name: str) -> Tensor:
    """Fetch a weight either as a recorded leaf or as a frozen constant."""
    if graph is None:
        return Tensor(store[name].value)
    return graph.param(store, name)


def _record(out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    graph = None
    for t in inputs:
        if t.graph is not None:
            if graph is None:
                graph = t.graph
            elif graph is not t.graph:
                raise ValueError("inputs recorded on different graphs")
    if graph is None:
        return Tensor(out)
    parents = tuple(t.node if t.graph is not None else None for t in inputs)
    graph.nodes.append(_Node(parents, backward))
    return Tensor(out, graph, len(graph.nodes) - 1)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return _record(out, (x,), lambda g: (g * _sigmoid(xd),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), back)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax_lastdim": softmax,
    "identity": lambda x: x,
}


def activation_apply(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# --------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), back)


def affine_apply(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b over the last axis of ``x`` (any number of leading axes)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or b.shape != (w.shape[1],) or x.shape[-1] != w.shape[0]:
        raise ValueError(f"affine shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])
    out = (x2 @ wd + b.data).reshape(*lead, wd.shape[1])

    def back(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = None if x.graph is None else (g2 @ wd.T).reshape(xd.shape)
        return gx, x2.T @ g2, g2.sum(axis=0)

    return _record(out, (x, w, b), back)


def transpose(x: Tensor) -> Tensor:
    return _record(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def set_mean(x: Tensor, mask: np.ndarray, axis: int, ordered: bool = True) -> Tensor:
    """Masked mean over a set axis, bitwise independent of element order.

    Values are sorted along ``axis`` before accumulation so that any
    permutation of the set members yields the identical float result.
    ``mask`` broadcasts against ``x`` with a trailing feature axis dropped.
    ``ordered=False`` skips the sort (same value up to rounding, cheaper).
    """
    axis = axis % x.ndim
    m = np.asarray(mask, dtype=DTYPE)
    m = m.reshape(m.shape + (1,) * (x.ndim - m.ndim))
    count = m.sum(axis=axis, keepdims=True)
    if np.any(count <= 0):
        raise ValueError("set pooling over an empty set")
    masked = np.where(m > 0, x.data, 0.0)
    if ordered:
        masked = np.sort(masked, axis=axis)
    out = masked.sum(axis=axis, keepdims=True) / count
    out = np.squeeze(out, axis=axis)

    def back(g):
        return (np.expand_dims(g, axis) * m / count,)

    return _record(out, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


class _SliceGrad:
    """Gradient that is nonzero only on ``x[idx]``; scattered in place."""

    __slots__ = ("idx", "g", "shape")

    def __init__(self, idx, g, shape):
        self.idx, self.g, self.shape = idx, g, shape


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    return _record(np.array(x.data[idx]), (x,), lambda g: (_SliceGrad(idx, g, shape),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in xs], axis=axis), xs, back)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _record(np.stack([t.data for t in xs], axis=axis), xs, back)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# --------------------------------------------------------------------------
# recurrent cell


def recurrent_step(h: Tensor, x: Tensor, wx: Tensor, uf: Tensor, uh: Tensor, b: Tensor) -> Tensor:
    """One step of a single-gate (minimal gated) recurrent unit.

    With hidden size H, ``wx`` is (I, 2H), ``uf`` and ``uh`` are (H, H), ``b`` is (2H,)::

        f  = sigmoid(x Wx_f + h Uf + b_f)
        c  = tanh(x Wx_c + (f * h) Uh + b_c)
        h' = (1 - f) * h + f * c

    Fused into a single tape node.
    """
    hd, xd = h.data, x.data
    H = uf.shape[0]
    if hd.shape[-1] != H or wx.shape != (xd.shape[-1], 2 * H) or hd.shape[0] != xd.shape[0]:
        raise ValueError(f"recurrent shape mismatch: h{hd.shape} x{xd.shape} wx{wx.shape}")
    wxd, ufd, uhd = wx.data, uf.data, uh.data
    xw = xd @ wxd + b.data
    f = _sigmoid(xw[:, :H] + hd @ ufd)
    fh = f * hd
    c = np.tanh(xw[:, H:] + fh @ uhd)
    out = hd + f * (c - hd)

    def back(g):
        dc = g * f
        df = g * (c - hd)
        dh = g * (1.0 - f)
        dac = dc * (1.0 - c * c)
        dfh = dac @ uhd.T
        df = df + dfh * hd
        dh = dh + dfh * f
        daf = df * f * (1.0 - f)
        dh = dh + daf @ ufd.T
        dxw = np.concatenate([daf, dac], axis=-1)
        return (dh, dxw @ wxd.T, xd.T @ dxw, hd.T @ daf, fh.T @ dac, dxw.sum(axis=0))

    return _record(out, (h, x, wx, uf, uh, b), back)


# --------------------------------------------------------------------------
# backward pass


def grad_backward(graph: Graph, loss: Tensor, store: "ParamStore | None" = None) -> list:
    """Reverse sweep from a scalar ``loss``; accumulates into ``store`` grads.

    Returns the per-node gradient list (``None`` where unreachable), then
    frees the tape.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if loss.graph is not graph:
        raise ValueError("loss was not recorded on this graph")
    nodes = graph.nodes
    grads: list = [None] * len(nodes)
    grads[loss.node] = np.ones_like(loss.data)
    # arrays in `owned` were allocated here and may be updated in place;
    # others can alias arrays handed out by a backward closure
    owned: set[int] = set()
    for i in range(loss.node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.backward is None:
            continue
        for p, gp in zip(node.parents, node.backward(g)):
            if p is None or gp is None:
                continue
            cur = grads[p]
            if isinstance(gp, _SliceGrad):
                if cur is None:
                    cur = np.zeros(gp.shape, dtype=DTYPE)
                elif p not in owned:
                    cur = cur.copy()
                owned.add(p)
                if _is_basic_index(gp.idx):
                    cur[gp.idx] += gp.g
                else:
                    np.add.at(cur, gp.idx, gp.g)
                grads[p] = cur
            elif cur is None:
                grads[p] = gp
            elif p in owned:
                cur += gp
            else:
                grads[p] = cur + gp
                owned.add(p)
    if store is not None:
        for name, leaf in graph._leaves.items():
            g = grads[leaf.node]
            if g is not None:
                store[name].grad += g
    graph.free()
    return grads


# --------------------------------------------------------------------------
# parameters


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True
    m: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass
class ParamStore:
    """Named weights with gradient slots and Adam moment buffers.

    Non-trainable entries hold frozen buffers (standardization moments,
    permutations) so that they travel with the checkpoint.
    """

    entries: dict[str, Param] = field(default_factory=dict)
    step_count: int = 0

    def __getitem__(self, name: str) -> Param:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def add(self, name: str, value, trainable: bool = True) -> Param:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=DTYPE)
        p = Param(value, np.zeros_like(value), trainable)
        self.entries[name] = p
        return p

    def set(self, name: str, value):
        """Overwrite a value in place (shape must match)."""
        p = self.entries[name]
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != p.value.shape:
            raise ValueError(f"shape mismatch for {name!r}: {value.shape} vs {p.value.shape}")
        p.value[...] = value

    def zero_grad(self):
        for p in self.entries.values():
            p.grad[...] = 0.0

    def trainable(self) -> Iterable[tuple[str, Param]]:
        return ((k, p) for k, p in self.entries.items() if p.trainable)

    def n_weights(self) -> int:
        return int(np.sum([p.value.size for _, p in self.trainable()]))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: float | None = None,
):
    """Adam update of every trainable entry; gradients are zeroed afterwards."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    store.step_count += 1
    t = store.step_count
    scale = 1.0
    if clip_norm is not None:
        total = math.sqrt(float(np.sum([np.sum(p.grad**2) for _, p in store.trainable()])))
        if total > clip_norm:
            scale = clip_norm / total
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for _, p in store.trainable():
        g = p.grad * scale
        if p.m is None:
            p.m = np.zeros_like(p.value)
            p.v = np.zeros_like(p.value)
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        p.value -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
        p.grad[...] = 0.0


# --------------------------------------------------------------------------
# checkpoint format
#
#   magic    8 bytes  b"ABMXCKPT"
#   version  u32 little-endian
#   hlen     u64 little-endian, length of the UTF-8 JSON header
#   header   {"step_count", "meta", "entries": [{"name", "shape", "trainable"}]}
#   payload  raw little-endian float64 values, entries in header order

MAGIC = b"ABMXCKPT"
FORMAT_VERSION = 1


def save_checkpoint(store: ParamStore, path, meta: dict | None = None):
    header = {
        "step_count": store.step_count,
        "meta": meta or {},
        "entries": [
            {"name": k, "shape": list(p.value.shape), "trainable": p.trainable}
            for k, p in store.entries.items()
        ],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for p in store.entries.values():
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[off : off + hlen].decode())
    off += hlen
    store = ParamStore(step_count=header["step_count"])
    for e in header["entries"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        store.add(e["name"], arr.astype(DTYPE), trainable=e["trainable"])
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return store, header["meta"]


def check_finite(t: Tensor, what: str):
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
