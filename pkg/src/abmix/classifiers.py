"""Soft classifiers for the mixture indicators.

Independent mixtures use one network per unit.  Dependent mixtures use a
forward filter (row t sees units 1..t) and a backward filter (row t sees
units t+1..N only; the last row carries zero logits).  Smoothing adds the
two logit sets and normalizes; it is an inference-time operation only.
"""

from __future__ import annotations

import numpy as np

from . import ndiff as nd
from .layers import MLP, Recurrent
from .ndiff import Graph, NumericError, ParamStore, Tensor
from .summary import masked_unroll

MODES = ("independent", "filter_forward", "filter_backward", "smooth")


def _theta_rows(theta: Tensor, N: int) -> Tensor:
    B, D = theta.shape
    return nd.broadcast_to(nd.reshape(theta, (B, 1, D)), (B, N, D))


class IndependentClassifier:
    def __init__(self, store: ParamStore, name: str, E: int, D: int, K: int, rng, hidden: int = 64, depth: int = 3,
                 zero_last: bool = False):
        self.K = K
        self.net = MLP(store, name, [E + D] + [hidden] * depth + [K], rng, zero_last=zero_last)

    def __call__(self, g: Graph | None, locals_: Tensor, theta) -> Tensor:
        theta = nd.as_tensor(theta)
        return self.net(g, nd.concat([locals_, _theta_rows(theta, locals_.shape[1])], axis=-1))


class FilterNet:
    """Recurrent filter over (unit embedding, theta) pairs with a dense head."""

    def __init__(self, store: ParamStore, name: str, E: int, D: int, K: int, rng, hidden: int = 32,
                 head_hidden: int = 64, depth: int = 2, reverse: bool = False, zero_last: bool = False):
        self.K, self.reverse = K, reverse
        self.cell = Recurrent(store, f"{name}.rnn", E + D, hidden, rng)
        self.head = MLP(store, f"{name}.head", [hidden + D] + [head_hidden] * depth + [K], rng, zero_last=zero_last)

    def __call__(self, g: Graph | None, locals_: Tensor, theta, unit_mask) -> Tensor:
        theta = nd.as_tensor(theta)
        unit_mask = np.asarray(unit_mask, bool)
        B, N = unit_mask.shape
        th = _theta_rows(theta, N)
        states = masked_unroll(self.cell, g, nd.concat([locals_, th], axis=-1), unit_mask, reverse=self.reverse)
        if self.reverse:
            # row t uses only units t+1..N: shift the reverse states by one
            zero = Tensor(np.zeros_like(states[0].data))
            states = states[1:] + [zero]
        h = nd.stack(states, axis=1)
        logits = self.head(g, nd.concat([h, th], axis=-1))
        if self.reverse:
            logits = logits * future_mask(unit_mask)[..., None]
        return logits


def future_mask(unit_mask) -> np.ndarray:
    """1 where at least one later unit exists, else 0."""
    unit_mask = np.asarray(unit_mask, bool)
    n = unit_mask.sum(-1)
    return (np.arange(unit_mask.shape[1])[None, :] < (n - 1)[:, None]).astype(float)


def classify_independent(net: IndependentClassifier, locals_, theta, g: Graph | None = None) -> Tensor:
    return net(g, nd.as_tensor(locals_), theta)


def filter_forward(net: FilterNet, locals_, theta, unit_mask, g: Graph | None = None) -> Tensor:
    if net.reverse:
        raise ValueError("this network was built as a backward filter")
    return net(g, nd.as_tensor(locals_), theta, unit_mask)


def filter_backward(net: FilterNet, locals_, theta, unit_mask, g: Graph | None = None) -> Tensor:
    if not net.reverse:
        raise ValueError("this network was built as a forward filter")
    return net(g, nd.as_tensor(locals_), theta, unit_mask)


def softmax_np(logits) -> np.ndarray:
    x = np.asarray(logits, float)
    x = x - x.max(-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(-1, keepdims=True)


def smooth_combine(fwd, bwd) -> np.ndarray:
    """softmax(forward logits + backward logits), row-wise."""
    fwd, bwd = np.asarray(getattr(fwd, "data", fwd)), np.asarray(getattr(bwd, "data", bwd))
    if fwd.shape != bwd.shape:
        raise ValueError(f"logit shapes differ: {fwd.shape} vs {bwd.shape}")
    return softmax_np(fwd + bwd)


def classification_loss(logits: Tensor, z, row_mask=None) -> Tensor:
    """Cross-entropy: mean over the included rows of each dataset, then over datasets.

    ``z`` holds indicators in 1..K; rows excluded by ``row_mask`` (padding)
    are ignored.  Datasets without any included row contribute zero.
    """
    logits = nd.as_tensor(logits)
    if logits.ndim == 2:
        logits = nd.reshape(logits, (1,) + logits.shape)
        z = np.asarray(z)[None]
        row_mask = None if row_mask is None else np.asarray(row_mask)[None]
    B, N, K = logits.shape
    z = np.asarray(z, int)
    m = np.ones((B, N)) if row_mask is None else np.asarray(row_mask, float)
    zi = z[m > 0]
    if zi.size and (zi.min() < 1 or zi.max() > K):
        raise ValueError(f"indicators must lie in 1..{K}")
    onehot = np.zeros((B, N, K))
    b, t = np.nonzero(m > 0)
    onehot[b, t, z[b, t] - 1] = 1.0
    count = m.sum(-1, keepdims=True)
    w = np.where(count > 0, m / np.maximum(count, 1), 0.0) / B
    return nd.sum(nd.mul(nd.log_softmax(logits), onehot * w[..., None])) * -1.0


def joint_loss(nets, batch, g: Graph | None = None, rng: np.random.Generator | None = None,
               weights: dict | None = None) -> tuple[Tensor, dict]:
    """NPE term plus the classifier cross-entropies (plus the optional summary
    MMD penalty).  Returns the weighted total and the unweighted term values."""
    weights = {} if weights is None else weights
    terms: dict[str, Tensor] = {}

    def run(label, fn):
        try:
            val = fn()
        except Exception as exc:
            raise type(exc)(f"[{label}] {exc}") from exc
        if not np.all(np.isfinite(val.data)):
            raise NumericError(f"[{label}] non-finite loss term")
        terms[label] = val

    enc = nets.encode(g, batch)
    run("npe", lambda: nets.npe_term(g, batch, enc))
    if nets.independent is not None:
        run("independent", lambda: classification_loss(
            nets.independent(g, enc.locals, enc.theta_std), batch.z, batch.unit_mask))
    if nets.forward is not None:
        run("forward", lambda: classification_loss(
            nets.forward(g, enc.locals, enc.theta_std, batch.unit_mask), batch.z, batch.unit_mask))
    if nets.backward is not None:
        run("backward", lambda: classification_loss(
            nets.backward(g, enc.locals, enc.theta_std, batch.unit_mask), batch.z, future_mask(batch.unit_mask)))
    if nets.mmd_weight > 0 and rng is not None:
        run("mmd", lambda: nets.mmd_term(enc, rng))
    total = None
    for label, val in terms.items():
        w = weights.get(label, nets.mmd_weight if label == "mmd" else 1.0)
        if w == 0:
            continue
        part = val if w == 1 else val * w
        total = part if total is None else total + part
    return total, {k: float(v.data) for k, v in terms.items()}
