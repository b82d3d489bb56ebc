"""Summary networks.

Local deep sets embed the replicate observations of one unit; global
networks pool unit embeddings into one fixed-length vector per dataset.
Set pooling is a masked mean that is bitwise order independent.
"""

from __future__ import annotations

import math

import numpy as np

from . import ndiff as nd
from .layers import MLP, Dense, Recurrent
from .ndiff import Graph, ParamStore, Tensor


class DeepSetLocal:
    """inner MLP per observation, masked mean over the unit, outer MLP.

    The outer network also sees log P_i because mean pooling discards the
    set size, which controls how sharp a unit's evidence is.
    """

    def __init__(self, store: ParamStore, name: str, obs_dim: int, out_dim: int, rng, hidden: int = 32,
                 depth: int = 2):
        self.out_dim = out_dim
        self.inner = MLP(store, f"{name}.inner", [obs_dim] + [hidden] * depth, rng, final_activation="relu")
        self.outer = MLP(store, f"{name}.outer", [hidden + 1] + [hidden] * (depth - 1) + [out_dim], rng)

    def __call__(self, g: Graph | None, y, obs_mask) -> Tensor:
        """``y`` is (B, N, P, obs_dim), ``obs_mask`` (B, N, P); returns (B, N, E).

        Padded units (all observations masked) get the embedding of a
        zero-size set, which downstream masks ignore.
        """
        obs_mask = np.asarray(obs_mask, bool)
        count = obs_mask.sum(-1)
        safe = obs_mask.copy()
        safe[..., 0] |= count == 0
        h = self.inner(g, nd.as_tensor(y))
        pooled = nd.set_mean(h, safe, axis=2, ordered=g is None)
        logp = np.log(np.maximum(count, 1))[..., None].astype(float)
        return self.outer(g, nd.concat([pooled, Tensor(logp)], axis=-1))


def deepset_local(net: DeepSetLocal, y_unit, g: Graph | None = None) -> np.ndarray:
    """Embedding of a single unit given as a (P, obs_dim) array."""
    y_unit = np.asarray(y_unit, float)
    if y_unit.ndim == 1:
        y_unit = y_unit[:, None]
    if len(y_unit) == 0:
        raise ValueError("a unit needs at least one observation")
    out = net(g, y_unit[None, None], np.ones((1, 1, len(y_unit)), bool))
    return out.data[0, 0]


class DeepSetGlobal:
    """inner MLP per unit embedding, masked mean over units, outer MLP."""

    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int, rng, hidden: int = 64,
                 depth: int = 2):
        self.out_dim = out_dim
        self.inner = MLP(store, f"{name}.inner", [in_dim] + [hidden] * depth, rng, final_activation="relu")
        self.outer = MLP(store, f"{name}.outer", [hidden] * depth + [out_dim], rng)

    def __call__(self, g: Graph | None, locals_: Tensor, unit_mask) -> Tensor:
        h = self.inner(g, locals_)
        return self.outer(g, nd.set_mean(h, unit_mask, axis=1, ordered=g is None))


def masked_unroll(cell: Recurrent, g: Graph | None, x: Tensor, mask, reverse: bool = False) -> list[Tensor]:
    """Recurrent states in input order, holding the state across padded steps.

    Padding sits at the end of each sequence, so a reverse pass stays at
    the zero state until it reaches the first real step.
    """
    mask = np.asarray(mask, float)
    B, T = x.shape[0], x.shape[1]
    w = cell.weights(g)
    h = Tensor(np.zeros((B, cell.hidden)))
    order = range(T - 1, -1, -1) if reverse else range(T)
    full = bool(mask.all())
    states: list[Tensor | None] = [None] * T
    for t in order:
        new = nd.recurrent_step(h, x[:, t, :], *w)
        if full:
            h = new
        else:
            m = mask[:, t, None]
            h = new * m + h * (1.0 - m)
        states[t] = h
    return states


class RecurrentGlobal:
    """Gated recurrence over ordered unit embeddings.

    Output is the last forward state, concatenated with the first state of
    a reverse pass when ``bidirectional``.  An optional dense front end maps
    raw per-step inputs to the recurrent width.
    """

    def __init__(self, store: ParamStore, name: str, in_dim: int, hidden: int, rng,
                 bidirectional: bool = False, front: int | None = None):
        self.front = Dense(store, f"{name}.front", in_dim, front, rng) if front else None
        width = front or in_dim
        self.fwd = Recurrent(store, f"{name}.fwd", width, hidden, rng)
        self.bwd = Recurrent(store, f"{name}.bwd", width, hidden, rng) if bidirectional else None
        self.out_dim = hidden * (2 if bidirectional else 1)

    def __call__(self, g: Graph | None, seq: Tensor, unit_mask) -> Tensor:
        unit_mask = np.asarray(unit_mask, bool)
        x = nd.activation_apply(self.front(g, seq), "tanh") if self.front else nd.as_tensor(seq)
        states = masked_unroll(self.fwd, g, x, unit_mask)
        out = states[-1]
        if self.bwd is not None:
            out = nd.concat([out, masked_unroll(self.bwd, g, x, unit_mask, reverse=True)[0]], axis=-1)
        return out


def recurrent_global(net: RecurrentGlobal, locals_, g: Graph | None = None) -> np.ndarray:
    """Summary of one ordered sequence given as an (N, E) array."""
    x = np.asarray(locals_, float)[None]
    return net(g, x, np.ones(x.shape[:2], bool)).data[0]


def _sq_dists(a: Tensor, b: Tensor) -> Tensor:
    aa = nd.sum(nd.square(a), axis=1, keepdims=True)
    bb = nd.sum(nd.square(b), axis=1, keepdims=True)
    return aa + nd.transpose(bb) - 2.0 * nd.matmul(a, nd.transpose(b))


def gaussian_kernel(a: Tensor, b: Tensor, bandwidth: float) -> Tensor:
    return nd.exp(_sq_dists(a, b) * (-0.5 / bandwidth**2))


def mmd_penalty(emb: Tensor, rng: np.random.Generator | None = None, bandwidth: float | None = None,
                reference: np.ndarray | None = None) -> Tensor:
    """Unbiased squared MMD between a batch of summaries and standard normal draws.

    The default bandwidth is sqrt(G / 2).  ``reference`` replaces the fresh
    normal draws (mainly for testing).
    """
    emb = nd.as_tensor(emb)
    B, G = emb.shape
    if B < 2:
        raise ValueError("MMD penalty needs a batch of at least two summaries")
    h = math.sqrt(G / 2) if bandwidth is None else bandwidth
    ref = rng.standard_normal((B, G)) if reference is None else np.asarray(reference, float)
    M = ref.shape[0]
    ref_t = Tensor(ref)
    # kernel diagonal is exactly one, so the off-diagonal sums are total minus count
    kxx = (nd.sum(gaussian_kernel(emb, emb, h)) - B) * (1.0 / (B * (B - 1)))
    kyy = (np.sum(np.exp(-0.5 * _sq_dists(ref_t, ref_t).data / h**2)) - M) / (M * (M - 1))
    kxy = nd.mean(gaussian_kernel(emb, ref_t, h))
    return kxx + kyy - 2.0 * kxy
