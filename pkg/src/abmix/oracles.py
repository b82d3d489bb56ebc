"""Exact reference computations: responsibilities, marginal likelihoods,
HMM recursions, first-passage densities and an importance-sampling posterior.

Everything is done in log space.  Functions accept leading batch axes on the
parameters where noted, so that many parameter draws can be scored at once.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import log_ndtr, logsumexp

log = logging.getLogger(__name__)

LOG2PI = math.log(2 * math.pi)


class UnderflowError(FloatingPointError):
    pass


def lse(x, axis=-1):
    """Log-sum-exp along one axis; cheaper than the general scipy routine for
    the short state axes used here."""
    x = np.asarray(x, float)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


# --------------------------------------------------------------------------
# independent mixtures


def gmm_responsibilities(y_unit, pi, mu, sigma=1.0) -> np.ndarray:
    """p(z_i = k | y_i, theta) for one unit of replicate normal observations."""
    y = np.asarray(y_unit, float).reshape(-1)
    mu = np.asarray(mu, float)
    ll = -0.5 * len(y) * (LOG2PI + 2 * np.log(sigma)) - ((y[:, None] - mu) ** 2).sum(0) / (2 * sigma**2)
    lw = np.log(np.asarray(pi, float)) + ll
    return np.exp(lw - logsumexp(lw))


def gmm_marginal_loglik(units, pi, mu, sigma=1.0) -> np.ndarray:
    """sum_i log sum_k pi_k p(y_i | mu_k); ``pi``, ``mu`` may carry a leading batch."""
    from .simulators import _normal_unit_loglik

    le = _normal_unit_loglik(list(units), mu, sigma)
    return logsumexp(np.log(np.asarray(pi))[..., None, :] + le, axis=-1).sum(-1)


# --------------------------------------------------------------------------
# hidden Markov models


@dataclass
class HmmSpec:
    """Initial distribution, transition rows and a per-unit emission log-density."""

    init: np.ndarray
    trans: np.ndarray
    log_emission: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        self.init = np.asarray(self.init, float)
        self.trans = np.asarray(self.trans, float)
        if np.any(np.abs(self.trans.sum(-1) - 1) > 1e-9) or abs(self.init.sum() - 1) > 1e-9:
            raise ValueError("initial distribution and transition rows must be simplices")

    def emission_matrix(self, y) -> np.ndarray:
        return np.stack([np.asarray(self.log_emission(u), float) for u in y])


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def forward_log(init, trans, log_emis):
    """Normalized forward recursion.

    ``trans`` is (..., K, K) and ``log_emis`` (..., N, K).  Returns
    ``(loglik (...), log_filtered (..., N, K))``.
    """
    log_emis = np.asarray(log_emis, float)
    lA = _log(np.asarray(trans, float))
    N = log_emis.shape[-2]
    out = np.empty_like(log_emis)
    la = _log(np.asarray(init, float)) + log_emis[..., 0, :]
    c = lse(la, axis=-1)
    total = c
    with np.errstate(invalid="ignore"):
        out[..., 0, :] = la - c[..., None]
        for t in range(1, N):
            la = lse(out[..., t - 1, :, None] + lA, axis=-2) + log_emis[..., t, :]
            c = lse(la, axis=-1)
            total = total + c
            out[..., t, :] = la - c[..., None]
    if np.any(~np.isfinite(total)):
        raise UnderflowError("zero total emission mass in forward recursion")
    return total, out


def backward_log(trans, log_emis):
    """Normalized log backward messages log beta_t(k), rescaled per step."""
    log_emis = np.asarray(log_emis, float)
    lA = _log(np.asarray(trans, float))
    N = log_emis.shape[-2]
    out = np.zeros_like(log_emis)
    for t in range(N - 2, -1, -1):
        lb = lse(lA + (log_emis[..., t + 1, :] + out[..., t + 1, :])[..., None, :], axis=-1)
        out[..., t, :] = lb - lse(lb, axis=-1)[..., None]
    return out


def prior_marginals(init, trans, N: int) -> np.ndarray:
    """p(z_t) under the chain alone, shape (..., N, K)."""
    trans = np.asarray(trans, float)
    p = np.broadcast_to(np.asarray(init, float), trans.shape[:-1]).copy()
    out = np.empty(trans.shape[:-2] + (N, trans.shape[-1]))
    for t in range(N):
        out[..., t, :] = p
        p = np.einsum("...i,...ij->...j", p, trans)
    return out


def hmm_forward(spec: HmmSpec, y) -> tuple[float, np.ndarray]:
    """Log-likelihood and filtered marginals p(z_t | y_1..y_t)."""
    if len(y) < 1:
        raise ValueError("need at least one observation unit")
    ll, lf = forward_log(spec.init, spec.trans, spec.emission_matrix(y))
    return float(ll), np.exp(lf)


def hmm_forward_backward(spec: HmmSpec, y) -> np.ndarray:
    """Smoothed marginals p(z_t | y_1..y_N)."""
    le = spec.emission_matrix(y)
    _, lf = forward_log(spec.init, spec.trans, le)
    return _normalize(lf + backward_log(spec.trans, le))


def hmm_future_filter(spec: HmmSpec, y) -> np.ndarray:
    """p(z_t | y_{t+1}..y_N): chain prior marginal times backward message.

    The last row has no future evidence and equals the prior marginal.
    """
    le = spec.emission_matrix(y)
    pm = prior_marginals(spec.init, spec.trans, len(le))
    return _normalize(_log(pm) + backward_log(spec.trans, le))


def _normalize(lp):
    return np.exp(lp - lse(lp, axis=-1)[..., None])


# --------------------------------------------------------------------------
# first-passage densities
#
# Wald (inverse Gaussian) with threshold a and drift v, t > 0:
#   f(t) = a / sqrt(2 pi t^3) * exp(-(a - v t)^2 / (2 t))
#   S(t) = Phi((a - v t) / sqrt(t)) - exp(2 a v) * Phi(-(a + v t) / sqrt(t))
# i.e. mean a / v and shape a^2.


def wald_logpdf(t, alpha, nu):
    t = np.asarray(t, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(alpha) - 0.5 * (LOG2PI + 3 * np.log(t)) - (alpha - nu * t) ** 2 / (2 * t)
    return np.where(t > 0, val, -np.inf)


def wald_logsf(t, alpha, nu):
    t = np.asarray(t, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        st = np.sqrt(t)
        a = log_ndtr((alpha - nu * t) / st)
        b = 2 * alpha * nu + log_ndtr(-(alpha + nu * t) / st)
        # log(e^a - e^b) with b < a
        val = a + np.log1p(-np.exp(np.minimum(b - a, 0.0)))
    return np.where(t > 0, val, 0.0)


def wald_cdf(t, alpha, nu):
    return -np.expm1(wald_logsf(t, alpha, nu))


def decision_loglik(rt, choice, state: int, params: dict):
    """Log density of one (rt, choice) pair under a latent state.

    state 1 (guessing): shifted Wald(alpha1, nu1) time, choice uniform.
    state 2 (controlled): racing diffusion with threshold alpha2; choice 2 means
    the nu22 racer finished first, choice 1 the nu21 racer.
    Returns -inf for rt <= tau.
    """
    rt = np.asarray(rt, float)
    choice = np.asarray(choice)
    t = rt - params["tau"]
    if state == 1:
        out = wald_logpdf(t, params["alpha1"], params["nu1"]) + math.log(0.5)
    elif state == 2:
        a = params["alpha2"]
        win = np.where(choice == 2, params["nu22"], params["nu21"])
        lose = np.where(choice == 2, params["nu21"], params["nu22"])
        out = wald_logpdf(t, a, win) + wald_logsf(t, a, lose)
    else:
        raise ValueError("state must be 1 or 2")
    return np.where(t > 0, out, -np.inf)


# --------------------------------------------------------------------------
# model-level oracles


def marginal_loglik(model, dataset, theta) -> np.ndarray:
    """log p(y | theta) with indicators summed out; ``theta`` may be (M, D)."""
    theta = np.asarray(theta, float)
    le = model.log_emissions(dataset, theta)
    if model.dependent:
        ll, _ = forward_log(model.init_probs(theta), model.transition(theta), le)
        return ll
    return lse(np.log(model.weights(theta))[..., None, :] + le, axis=-1).sum(-1)


def class_probs(model, dataset, theta, mode: str = "independent") -> np.ndarray:
    """Exact p(z_t | ., theta) for one parameter vector, shape (N, K)."""
    theta = np.asarray(theta, float)
    le = model.log_emissions(dataset, theta)
    if not model.dependent:
        if mode != "independent":
            raise ValueError(f"mode {mode!r} needs a dependent mixture")
        return _normalize(np.log(model.weights(theta))[None, :] + le)
    init, trans = model.init_probs(theta), model.transition(theta)
    if mode in ("filter_forward", "independent"):
        return np.exp(forward_log(init, trans, le)[1])
    if mode == "smooth":
        return _normalize(forward_log(init, trans, le)[1] + backward_log(trans, le))
    if mode == "filter_backward":
        return _normalize(_log(prior_marginals(init, trans, len(le))) + backward_log(trans, le))
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class WeightedDraws:
    draws: np.ndarray  # (M, D) unconstrained
    weights: np.ndarray  # (M,), sums to one
    ess: float
    reliable: bool

    def mean(self):
        return self.weights @ self.draws

    def quantile(self, q, dim: int):
        return weighted_quantile(self.draws[:, dim], self.weights, q)


def weighted_quantile(x, w, q):
    order = np.argsort(x)
    x, w = np.asarray(x)[order], np.asarray(w)[order]
    cw = np.cumsum(w) - 0.5 * w
    cw /= w.sum()
    return np.interp(q, cw, x)


def effective_sample_size(w) -> float:
    w = np.asarray(w, float)
    return float(w.sum() ** 2 / np.sum(w * w))


def is_posterior_oracle(dataset, model, M: int, rng: np.random.Generator, chunk: int = 20_000,
                        min_ess: float = 50.0) -> WeightedDraws:
    """Self-normalized importance sampling with the prior as proposal.

    Weights are proportional to the marginal likelihood.  ``reliable`` is
    False when the effective sample size falls below ``min_ess``.
    """
    draws = model.sample_prior(rng, M)
    logw = np.concatenate([marginal_loglik(model, dataset, draws[i: i + chunk]) for i in range(0, M, chunk)])
    w = np.exp(logw - logw.max())
    w /= w.sum()
    ess = effective_sample_size(w)
    if ess < min_ess:
        log.warning("importance-sampling oracle unreliable: ESS %.1f < %.0f", ess, min_ess)
    return WeightedDraws(draws, w, ess, ess >= min_ess)
