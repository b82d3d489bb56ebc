"""Bijections between constrained parameters and the real line.

Stick-breaking for simplex vectors (the unconstrained origin maps to the
uniform simplex) and log-gap coding for increasing vectors.  The functions
operate on the last axis, so batches of vectors are handled directly.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

EDGE = 1e-12


class BoundaryError(ValueError):
    """Input lies on the boundary where the transform is undefined."""


def _offsets(K: int) -> np.ndarray:
    # log(1 / (K - k)) for k = 1..K-1
    return -np.log(K - np.arange(1, K))


def simplex_unconstrain(p) -> np.ndarray:
    """Map a K-simplex vector to R^(K-1) by stick-breaking."""
    p = np.asarray(p, dtype=float)
    K = p.shape[-1]
    if K < 2:
        raise ValueError("simplex needs K >= 2")
    if np.any(p <= 0) or np.any(p >= 1):
        raise BoundaryError("simplex entries must lie strictly inside (0, 1)")
    if np.any(np.abs(p.sum(-1) - 1) > 1e-9):
        raise ValueError("simplex entries must sum to one")
    # logit(p_k / sum_{j>=k} p_j) = log p_k - log sum_{j>k} p_j; tail sums keep tiny entries exact
    tail = np.cumsum(p[..., ::-1], axis=-1)[..., ::-1]
    return np.log(p[..., :-1]) - np.log(tail[..., 1:]) - _offsets(K)


def simplex_constrain(theta) -> np.ndarray:
    """Inverse of :func:`simplex_unconstrain`.

    The remaining stick is carried multiplicatively and becomes the last
    entry, so small trailing entries keep full relative precision; the sum
    is one up to a few ulps.
    """
    theta = np.asarray(theta, dtype=float)
    K = theta.shape[-1] + 1
    a = theta + _offsets(K)
    z, rest = expit(a), expit(-a)
    out = np.empty(theta.shape[:-1] + (K,))
    stick = np.ones(theta.shape[:-1])
    for k in range(K - 1):
        out[..., k] = stick * z[..., k]
        stick = stick * rest[..., k]
    out[..., K - 1] = stick
    return out


def simplex_log_jacobian(theta) -> np.ndarray:
    """log |d(p_1..p_{K-1}) / d theta| of :func:`simplex_constrain`."""
    theta = np.asarray(theta, dtype=float)
    K = theta.shape[-1] + 1
    u = theta + _offsets(K)
    p = simplex_constrain(theta)
    remaining = 1.0 - np.concatenate([np.zeros(p.shape[:-1] + (1,)), np.cumsum(p[..., :-2], axis=-1)], axis=-1)
    # log z + log(1 - z) = -softplus(-u) - softplus(u)
    return np.sum(-np.logaddexp(0, -u) - np.logaddexp(0, u) + np.log(remaining), axis=-1)


def clamp_simplex(p) -> np.ndarray:
    """Pull externally supplied simplex entries off the boundary."""
    p = np.clip(np.asarray(p, dtype=float), EDGE, 1 - EDGE)
    return p / p.sum(-1, keepdims=True)


def ordered_unconstrain(m) -> np.ndarray:
    """(m_1, log(m_2 - m_1), ..., log(m_K - m_{K-1}))."""
    m = np.asarray(m, dtype=float)
    gaps = np.diff(m, axis=-1)
    if np.any(gaps <= 0):
        raise BoundaryError("ordered vector must be strictly increasing")
    return np.concatenate([m[..., :1], np.log(gaps)], axis=-1)


def ordered_constrain(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return np.cumsum(np.concatenate([theta[..., :1], np.exp(theta[..., 1:])], axis=-1), axis=-1)


def ordered_log_jacobian(theta) -> np.ndarray:
    return np.sum(np.asarray(theta, dtype=float)[..., 1:], axis=-1)


def sample_ordered_normal(loc, scale, rng: np.random.Generator, size: int | None = None,
                          window: int = 10_000, min_rate: float = 1e-4):
    """Draw from independent normals restricted to the increasing region.

    Rejection against the unrestricted normal.  Returns ``(draws,
    acceptance_rate)``; ``draws`` has shape ``(K,)`` when ``size`` is None.
    A warning is logged when the acceptance rate over a window of
    proposals drops below ``min_rate``.
    """
    loc = np.asarray(loc, dtype=float)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), loc.shape)
    if np.any(scale < 0):
        raise ValueError("scale must be non-negative")
    n = 1 if size is None else int(size)
    kept: list[np.ndarray] = []
    got = proposed = 0
    warned = False
    while got < n:
        batch = max(16, 2 * (n - got))
        x = loc + scale * rng.standard_normal((batch, loc.size))
        ok = np.all(np.diff(x, axis=-1) > 0, axis=-1)
        proposed += batch
        kept.append(x[ok])
        got += int(ok.sum())
        if not warned and proposed >= window and got / proposed < min_rate:
            log.warning("ordered-normal acceptance rate %.2e below %.0e; priors overlap too much",
                        got / proposed, min_rate)
            warned = True
    draws = np.concatenate(kept)[:n]
    rate = got / proposed
    return (draws[0] if size is None else draws), rate
