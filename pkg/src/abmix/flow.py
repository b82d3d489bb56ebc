"""Conditional affine-coupling flow for the parameter posterior.

The stack maps unconstrained parameters theta to a standard-normal base
variable xi, conditioned on a vector ``cond``.  The first stage is a fixed
per-dimension standardization (moments frozen in the store); each coupling
layer then rescales and shifts one subset of coordinates given the others
and ``cond``.  Log-scales are squashed as s_max * tanh(raw / s_max).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndiff as nd
from .layers import MLP
from .ndiff import Graph, NumericError, ParamStore, Tensor, bind

LOG2PI = math.log(2 * math.pi)


class AffineCoupling:
    def __init__(self, store: ParamStore, name: str, D: int, C: int, rng, hidden: int = 64, depth: int = 2,
                 perm=None, s_max: float = 3.0):
        self.store, self.name, self.D, self.s_max = store, name, D, s_max
        perm = np.arange(D) if perm is None else np.asarray(perm, int)
        if sorted(perm.tolist()) != list(range(D)):
            raise ValueError("coupling permutation must cover every dimension once")
        store.add(f"{name}.perm", perm.astype(float), trainable=False)
        self._set_split(perm)
        n_in = len(self.keep) + C
        self.net = MLP(store, f"{name}.net", [n_in] + [hidden] * depth + [2 * len(self.move)], rng,
                       zero_last=True)

    def _set_split(self, perm):
        half = self.D // 2
        self.keep, self.move = perm[:half], perm[half:]
        self.inv = np.argsort(np.concatenate([self.keep, self.move]))

    def refresh(self):
        """Re-read the permutation after weights are loaded."""
        self._set_split(self.store[f"{self.name}.perm"].value.astype(int))

    def _scale_shift(self, g, keep: Tensor, cond: Tensor):
        inp = cond if len(self.keep) == 0 else nd.concat([keep, cond], axis=-1)
        raw = self.net(g, inp)
        m = len(self.move)
        s = nd.tanh(raw[:, :m] * (1.0 / self.s_max)) * self.s_max
        return s, raw[:, m:]

    def _join(self, keep: Tensor, moved: Tensor) -> Tensor:
        parts = [moved] if len(self.keep) == 0 else [keep, moved]
        return nd.concat(parts, axis=-1)[:, self.inv]

    def forward(self, g, x: Tensor, cond: Tensor):
        keep, mv = x[:, self.keep], x[:, self.move]
        s, t = self._scale_shift(g, keep, cond)
        return self._join(keep, mv * nd.exp(s) + t), nd.sum(s, axis=1)

    def inverse(self, g, y: Tensor, cond: Tensor):
        keep, mv = y[:, self.keep], y[:, self.move]
        s, t = self._scale_shift(g, keep, cond)
        return self._join(keep, (mv - t) * nd.exp(-s)), -nd.sum(s, axis=1)


class FlowStack:
    """Standardization followed by ``n_layers`` couplings.

    Layer ``l`` uses a seeded random permutation, reversed on odd layers so
    that consecutive layers alternate which half is transformed.
    """

    def __init__(self, store: ParamStore, name: str, D: int, C: int, rng, n_layers: int = 6, hidden: int = 64,
                 depth: int = 2, s_max: float = 3.0, permute: bool = True):
        self.store, self.name, self.D, self.C = store, name, D, C
        store.add(f"{name}.loc", np.zeros(D), trainable=False)
        store.add(f"{name}.scale", np.ones(D), trainable=False)
        self.layers = []
        for i in range(n_layers):
            p = rng.permutation(D) if permute else np.arange(D)
            if i % 2 == 1:
                p = p[::-1]
            self.layers.append(AffineCoupling(store, f"{name}.{i}", D, C, rng, hidden, depth, p, s_max))

    def set_standardization(self, loc, scale):
        scale = np.asarray(scale, float)
        if np.any(scale <= 0):
            raise ValueError("standardization scales must be positive")
        self.store.set(f"{self.name}.loc", np.asarray(loc, float))
        self.store.set(f"{self.name}.scale", scale)

    def refresh(self):
        for layer in self.layers:
            layer.refresh()

    def standardize(self, theta) -> np.ndarray:
        return (np.asarray(theta, float) - self.store[f"{self.name}.loc"].value) / self.store[f"{self.name}.scale"].value

    def _check(self, x: Tensor, cond: Tensor):
        if x.ndim != 2 or x.shape[1] != self.D:
            raise ValueError(f"flow expects (B, {self.D}) inputs, got {x.shape}")
        if cond.ndim != 2 or cond.shape[1] != self.C or cond.shape[0] != x.shape[0]:
            raise ValueError(f"flow expects (B, {self.C}) conditions, got {cond.shape}")


def flow_forward(flow: FlowStack, theta, cond, g: Graph | None = None) -> tuple[Tensor, Tensor]:
    """xi = f(theta; cond) and log|det df/dtheta| per row."""
    x, c = nd.as_tensor(theta), nd.as_tensor(cond)
    flow._check(x, c)
    scale = flow.store[f"{flow.name}.scale"].value
    x = (x - Tensor(flow.store[f"{flow.name}.loc"].value)) * (1.0 / scale)
    logdet = Tensor(np.full(x.shape[0], -np.sum(np.log(scale))))
    for i, layer in enumerate(flow.layers):
        x, ld = layer.forward(g, x, c)
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite output in coupling layer {i}")
        logdet = logdet + ld
    return x, logdet


def flow_inverse(flow: FlowStack, xi, cond, g: Graph | None = None) -> Tensor:
    y, c = nd.as_tensor(xi), nd.as_tensor(cond)
    flow._check(y, c)
    for i in range(len(flow.layers) - 1, -1, -1):
        y, _ = flow.layers[i].inverse(g, y, c)
        if not np.all(np.isfinite(y.data)):
            raise NumericError(f"non-finite output in coupling layer {i}")
    return y * flow.store[f"{flow.name}.scale"].value + Tensor(flow.store[f"{flow.name}.loc"].value)


def base_log_density(xi: Tensor) -> Tensor:
    D = xi.shape[1]
    return nd.sum(nd.square(xi), axis=1) * -0.5 - 0.5 * D * LOG2PI


def flow_log_density(flow: FlowStack, theta, cond, g: Graph | None = None) -> Tensor:
    xi, logdet = flow_forward(flow, theta, cond, g)
    return base_log_density(xi) + logdet


def npe_loss(flow: FlowStack, theta, cond, g: Graph | None = None) -> Tensor:
    """Mean negative log posterior density over the batch."""
    return nd.mean(flow_log_density(flow, theta, cond, g)) * -1.0


@dataclass
class PosteriorDraws:
    unconstrained: np.ndarray  # (S, D)
    constrained: np.ndarray  # (S, D) display view
    log_q: np.ndarray  # (S,), density of the unconstrained draws
    names: list

    @property
    def S(self) -> int:
        return self.unconstrained.shape[0]


def flow_sample(flow: FlowStack, cond, S: int, rng: np.random.Generator, display=None, names=None,
                chunk: int = 4096) -> PosteriorDraws:
    """S draws for one condition vector via the inverse pass; ``display`` maps
    unconstrained rows to the constrained view."""
    cond = np.asarray(cond, float).reshape(1, -1)
    xi = rng.standard_normal((S, flow.D))
    outs, logq = [], []
    for i in range(0, S, chunk):
        part = xi[i: i + chunk]
        c = np.repeat(cond, len(part), axis=0)
        th = flow_inverse(flow, part, c).data
        outs.append(th)
        logq.append(flow_log_density(flow, th, c).data)
    theta = np.concatenate(outs)
    shown = display(theta) if display is not None else theta
    return PosteriorDraws(theta, shown, np.concatenate(logq), list(names or [f"theta{k + 1}" for k in range(flow.D)]))
