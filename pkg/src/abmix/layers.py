"""Weight-owning building blocks over :mod:`abmix.ndiff`."""

from __future__ import annotations

import numpy as np

from . import ndiff as nd
from .ndiff import Graph, ParamStore, Tensor, bind


class Dense:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, rng, zero: bool = False):
        self.store, self.name = store, name
        self.n_in, self.n_out = n_in, n_out
        w = np.zeros((n_in, n_out)) if zero else nd.glorot_uniform(rng, n_in, n_out)
        store.add(f"{name}.w", w)
        store.add(f"{name}.b", np.zeros(n_out))

    def __call__(self, g: Graph | None, x: Tensor) -> Tensor:
        return nd.affine_apply(x, bind(g, self.store, f"{self.name}.w"), bind(g, self.store, f"{self.name}.b"))


class MLP:
    """Dense stack; hidden layers use ``activation``, the last layer is linear
    unless ``final_activation`` is given."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        sizes: list[int],
        rng,
        activation: str = "relu",
        final_activation: str | None = None,
        zero_last: bool = False,
    ):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output size")
        self.layers = [
            Dense(store, f"{name}.{i}", a, b, rng, zero=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.activation = activation
        self.final_activation = final_activation

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def __call__(self, g: Graph | None, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(g, x)
            if i < last:
                x = nd.activation_apply(x, self.activation)
            elif self.final_activation:
                x = nd.activation_apply(x, self.final_activation)
        return x


class Recurrent:
    """Minimal gated recurrent unit unrolled over axis 1 of a (B, T, I) input."""

    def __init__(self, store: ParamStore, name: str, n_in: int, hidden: int, rng):
        self.store, self.name, self.hidden = store, name, hidden
        store.add(f"{name}.wx", nd.glorot_uniform(rng, n_in, 2 * hidden, (n_in, 2 * hidden)))
        store.add(f"{name}.uf", nd.glorot_uniform(rng, hidden, hidden))
        store.add(f"{name}.uh", nd.glorot_uniform(rng, hidden, hidden))
        store.add(f"{name}.b", np.zeros(2 * hidden))

    def weights(self, g):
        return [bind(g, self.store, f"{self.name}.{k}") for k in ("wx", "uf", "uh", "b")]

    def step(self, g, h: Tensor, x: Tensor) -> Tensor:
        return nd.recurrent_step(h, x, *self.weights(g))

    def unroll(self, g: Graph | None, x: Tensor, reverse: bool = False, h0: Tensor | None = None) -> list[Tensor]:
        """Hidden state after each input, in input order.

        With ``reverse`` the sequence is consumed from the end; entry t of the
        result is then the state after reading inputs t..T-1.
        """
        w = self.weights(g)
        B, T = x.shape[0], x.shape[1]
        h = h0 if h0 is not None else Tensor(np.zeros((B, self.hidden)))
        order = range(T - 1, -1, -1) if reverse else range(T)
        states: list[Tensor | None] = [None] * T
        for t in order:
            h = nd.recurrent_step(h, x[:, t, :], *w)
            states[t] = h
        return states
