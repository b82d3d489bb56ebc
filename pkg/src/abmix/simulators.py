"""Generative models: prior draws, latent indicators and observations.

Four models are available through :func:`make_model`:

``gmm``
    independent Gaussian mixture with ordered means and Dirichlet weights.
``hmm``
    Gaussian hidden Markov model with per-time-point replicate observations.
``decision``
    two-state HMM over a guessing state (shifted Wald time, coin-flip choice)
    and a controlled state (racing diffusion between two Wald accumulators).
``toy``
    conjugate normal-mean model without indicators, used to check the
    posterior machinery against closed-form answers.

Each model owns the map between the unconstrained parameter vector that the
networks see and the constrained, named parameters.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import gammaln

from . import transforms as tr

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# first-passage samplers


def wald_sample(alpha, nu, tau, rng: np.random.Generator, size=None):
    """Shifted Wald draw: first passage of drift ``nu`` to threshold ``alpha``
    plus shift ``tau``; i.e. inverse Gaussian (mean alpha/nu, shape alpha^2) + tau.

    Uses the transformation-with-rejection method (one normal and one
    uniform per draw).
    """
    alpha, nu, tau = np.asarray(alpha, float), np.asarray(nu, float), np.asarray(tau, float)
    if np.any(alpha <= 0) or np.any(nu <= 0):
        raise ValueError("Wald threshold and drift must be positive")
    if np.any(tau < 0):
        raise ValueError("Wald shift must be non-negative")
    shape = np.broadcast_shapes(alpha.shape, nu.shape, tau.shape) if size is None else size
    mu = alpha / nu
    lam = alpha * alpha
    v = rng.standard_normal(shape) ** 2
    u = rng.uniform(size=shape)
    x = mu + mu * mu * v / (2 * lam) - mu / (2 * lam) * np.sqrt(4 * mu * lam * v + (mu * v) ** 2)
    # guard against cancellation when mu*v/lam is huge
    x = np.maximum(x, np.finfo(float).tiny)
    t = np.where(u <= mu / (mu + x), x, mu * mu / x)
    out = t + tau
    return float(out) if np.ndim(out) == 0 else out


def rdm_sample(alpha2, nu21, nu22, tau, rng: np.random.Generator, size=None):
    """Racing diffusion between an error accumulator (drift ``nu21``) and a
    correct accumulator (drift ``nu22``) sharing threshold ``alpha2``.

    Returns ``(rt, choice)`` with choice 1 when the error racer wins and 2
    when the correct racer wins.
    """
    for v in (alpha2, nu21, nu22):
        if np.any(np.asarray(v) <= 0):
            raise ValueError("racing diffusion parameters must be positive")
    t1 = wald_sample(alpha2, nu21, 0.0, rng, size)
    t2 = wald_sample(alpha2, nu22, 0.0, rng, size)
    rt = np.minimum(t1, t2) + tau
    choice = np.where(t2 < t1, 2, 1)
    if np.ndim(rt) == 0:
        return float(rt), int(choice)
    return rt, choice


def truncated_normal(loc, scale, rng, lower=0.0):
    """Normal(loc, scale) restricted to (lower, inf), by rejection."""
    tries = 0
    while True:
        tries += 1
        x = loc + scale * rng.standard_normal()
        if x > lower:
            if tries > 1:
                log.debug("truncated normal accepted after %d proposals", tries)
            return x


def truncated_normal_many(loc, scale, rng, size: int, lower=0.0) -> np.ndarray:
    out = np.empty(size)
    todo = np.arange(size)
    while todo.size:
        x = loc + scale * rng.standard_normal(todo.size)
        ok = x > lower
        out[todo[ok]] = x[ok]
        todo = todo[~ok]
    return out


# --------------------------------------------------------------------------
# configurations


def _int_range(r):
    lo, hi = int(r[0]), int(r[1])
    if lo > hi or lo < 1:
        raise ValueError(f"invalid range {r}")
    return lo, hi


@dataclass
class GmmConfig:
    K: int = 3
    n_range: tuple[int, int] = (150, 250)
    p_range: tuple[int, int] = (2, 4)
    mu_loc: tuple[float, ...] = (-2.0, 0.0, 2.0)
    mu_scale: float = 1.0
    concentration: tuple[float, ...] = (2.0, 2.0, 2.0)
    sigma: float = 1.0


@dataclass
class HmmConfig:
    K: int = 2
    n_range: tuple[int, int] = (100, 100)
    p_range: tuple[int, int] = (2, 5)
    mu_loc: tuple[float, ...] = (-1.5, 1.5)
    mu_scale: float = 1.0
    concentration: tuple[float, ...] = (2.0, 2.0)
    init: tuple[float, ...] = (0.5, 0.5)
    sigma: float = 1.0


@dataclass
class DecisionConfig:
    n_range: tuple[int, int] = (400, 400)
    concentration: tuple[float, ...] = (2.0, 2.0)
    init: tuple[float, ...] = (0.5, 0.5)
    alpha1: tuple[float, float] = (0.5, 0.3)
    nu1: tuple[float, float] = (5.5, 1.0)
    alpha_gap: tuple[float, float] = (1.5, 0.5)
    nu21: tuple[float, float] = (2.5, 0.5)
    nu_gap: tuple[float, float] = (2.5, 1.0)
    tau_rate: float = 5.0


@dataclass
class ToyConfig:
    n_range: tuple[int, int] = (5, 20)
    prior_loc: float = 0.0
    prior_scale: float = 1.0
    sigma: float = 1.0


# --------------------------------------------------------------------------
# datasets and batches


@dataclass
class Dataset:
    """One simulated or observed dataset.

    ``units[i]`` is an array of shape (P_i, obs_dim).  ``z`` holds indicators
    in 1..K when known.  ``theta`` is the unconstrained parameter vector when
    known.
    """

    model: str
    units: list[np.ndarray]
    z: np.ndarray | None = None
    theta: np.ndarray | None = None

    @property
    def N(self) -> int:
        return len(self.units)

    @property
    def P(self) -> np.ndarray:
        return np.array([len(u) for u in self.units])

    def shifted(self, delta: float, column: int = 0) -> "Dataset":
        units = [u.copy() for u in self.units]
        for u in units:
            u[:, column] += delta
        return Dataset(self.model, units, None, None)


@dataclass
class SimBatch:
    theta_unc: np.ndarray  # (B, D)
    z: np.ndarray  # (B, Nmax) int, 0 in padded slots
    y: np.ndarray  # (B, Nmax, Pmax, obs_dim), 0 in padded slots
    unit_mask: np.ndarray  # (B, Nmax) bool
    obs_mask: np.ndarray  # (B, Nmax, Pmax) bool
    n: np.ndarray  # (B,)
    p: np.ndarray  # (B, Nmax), 0 in padded slots
    K: int = 1

    @property
    def B(self) -> int:
        return self.y.shape[0]

    def validate(self):
        if not np.all(np.isfinite(self.theta_unc)):
            raise ValueError("non-finite theta in batch")
        zu = self.z[self.unit_mask]
        if zu.size and (zu.min() < 1 or zu.max() > self.K):
            raise ValueError("indicator outside 1..K")
        if np.any(self.z[~self.unit_mask] != 0):
            raise ValueError("indicator set in padded slot")
        if np.any(self.obs_mask & ~self.unit_mask[..., None]):
            raise ValueError("observation mask outside unit mask")
        if np.any(self.obs_mask.sum(-1)[self.unit_mask] != self.p[self.unit_mask]):
            raise ValueError("observation counts disagree with mask")
        if np.any(self.y[~self.obs_mask] != 0):
            raise ValueError("padded observation slot was written")
        if np.any(self.unit_mask.sum(-1) != self.n):
            raise ValueError("unit counts disagree with mask")
        return self


def collate(datasets: list[Dataset], D: int, K: int, obs_dim: int) -> SimBatch:
    B = len(datasets)
    nmax = max(d.N for d in datasets)
    pmax = max(int(d.P.max()) for d in datasets)
    y = np.zeros((B, nmax, pmax, obs_dim))
    obs_mask = np.zeros((B, nmax, pmax), bool)
    unit_mask = np.zeros((B, nmax), bool)
    z = np.zeros((B, nmax), int)
    p = np.zeros((B, nmax), int)
    theta = np.zeros((B, D))
    for b, d in enumerate(datasets):
        N, P = d.N, d.P
        unit_mask[b, :N] = True
        p[b, :N] = P
        ui = np.repeat(np.arange(N), P)
        oi = np.arange(P.sum()) - np.repeat(np.cumsum(P) - P, P)
        y[b, ui, oi] = np.concatenate(d.units)
        obs_mask[b, ui, oi] = True
        if d.z is not None:
            z[b, :N] = d.z
        if d.theta is not None:
            theta[b] = d.theta
    return SimBatch(theta, z, y, unit_mask, obs_mask, unit_mask.sum(-1), p, K)


def markov_chain(init, trans, N: int, rng) -> np.ndarray:
    """State path in 1..K of length N."""
    u = rng.uniform(size=N)
    cum0 = np.cumsum(init)
    cum = np.cumsum(trans, axis=-1)
    K = len(cum0)
    z = np.empty(N, int)
    s = min(int(np.searchsorted(cum0, u[0], side="right")), K - 1)
    z[0] = s
    for t in range(1, N):
        s = min(int(np.searchsorted(cum[s], u[t], side="right")), K - 1)
        z[t] = s
    return z + 1


def _normal_units(mu_z: np.ndarray, P: np.ndarray, sigma: float, rng) -> list[np.ndarray]:
    vals = np.repeat(mu_z, P) + sigma * rng.standard_normal(int(P.sum()))
    return np.split(vals[:, None], np.cumsum(P)[:-1])


def dataset_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for dataset ``index`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, index)))


# --------------------------------------------------------------------------
# models


class Model:
    name = "base"
    K = 1
    obs_dim = 1
    dependent = False
    uses_local = True
    config_cls: type = object

    def __init__(self, cfg=None):
        self.cfg = cfg if cfg is not None else self.config_cls()
        for f_ in fields(self.cfg):
            if f_.name.endswith("_range"):
                setattr(self.cfg, f_.name, _int_range(getattr(self.cfg, f_.name)))

    # subclasses provide: D, param_names, sample_theta, sample_context,
    # simulate_from, constrain, display, log_prior, log_emissions

    def simulate(self, rng: np.random.Generator, N: int | None = None, P=None) -> Dataset:
        theta = self.sample_theta(rng)
        return self.simulate_from(theta, rng, N=N, P=P)

    def simulate_batch(self, B: int, seed: int, start: int = 0, stream: int = 0, N=None, P=None,
                       workers: int = 1) -> SimBatch:
        """Fresh batch; dataset ``start + b`` always uses the same substream."""
        def one(b):
            return self.simulate(dataset_rng(seed, start + b, stream), N=N, P=P)

        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(workers) as ex:
                sets = list(ex.map(one, range(B)))
        else:
            sets = [one(b) for b in range(B)]
        return collate(sets, self.D, self.K, self.obs_dim)

    def batch_of(self, datasets: list[Dataset]) -> SimBatch:
        return collate(datasets, self.D, self.K, self.obs_dim)

    def sample_prior(self, rng: np.random.Generator, M: int) -> np.ndarray:
        return np.stack([self.sample_theta(rng) for _ in range(M)])

    def context(self, N, P) -> np.ndarray:
        """Context variables fed to the posterior network: (N, mean P)."""
        return np.array([float(N), float(np.mean(P))])

    def dataset_context(self, d: Dataset) -> np.ndarray:
        return self.context(d.N, d.P)

    def batch_context(self, batch: SimBatch) -> np.ndarray:
        meanp = batch.p.sum(-1) / np.maximum(batch.n, 1)
        return np.stack([batch.n.astype(float), meanp], axis=-1)

    def init_probs(self, theta) -> np.ndarray:
        raise NotImplementedError

    def transition(self, theta) -> np.ndarray:
        raise NotImplementedError


def _normal_unit_loglik(units: list[np.ndarray], mu: np.ndarray, sigma: float) -> np.ndarray:
    """log p(y_i | z_i = k) for normal emissions, any leading batch on ``mu``.

    ``mu`` has shape (..., K); result has shape (..., N, K).
    """
    s1 = np.array([u[:, 0].sum() for u in units])
    s2 = np.array([(u[:, 0] ** 2).sum() for u in units])
    P = np.array([len(u) for u in units], dtype=float)
    mu = np.asarray(mu)[..., None, :]
    quad = s2[:, None] - 2 * mu * s1[:, None] + P[:, None] * mu * mu
    return -0.5 * P[:, None] * math.log(2 * math.pi * sigma * sigma) - quad / (2 * sigma * sigma)


def _dirichlet_logpdf(p, conc):
    conc = np.asarray(conc, float)
    return np.sum((conc - 1) * np.log(p), axis=-1) + gammaln(conc.sum()) - gammaln(conc).sum()


class GmmModel(Model):
    name = "gmm"
    config_cls = GmmConfig

    def __init__(self, cfg: GmmConfig | None = None):
        super().__init__(cfg)
        self.K = self.cfg.K
        if self.K < 2 or len(self.cfg.mu_loc) != self.K or len(self.cfg.concentration) != self.K:
            raise ValueError("GMM needs K >= 2 and K prior locations/concentrations")
        self.D = 2 * self.K - 1
        self.param_names = [f"mu{k + 1}" for k in range(self.K)] + [f"pi{k + 1}" for k in range(self.K)]

    def sample_theta(self, rng):
        mu, _ = tr.sample_ordered_normal(self.cfg.mu_loc, self.cfg.mu_scale, rng)
        pi = rng.dirichlet(self.cfg.concentration)
        pi = tr.clamp_simplex(pi)
        return np.concatenate([tr.ordered_unconstrain(mu), tr.simplex_unconstrain(pi)])

    def sample_prior(self, rng, M):
        mu, _ = tr.sample_ordered_normal(self.cfg.mu_loc, self.cfg.mu_scale, rng, size=M)
        pi = tr.clamp_simplex(rng.dirichlet(self.cfg.concentration, size=M))
        return np.concatenate([tr.ordered_unconstrain(mu), tr.simplex_unconstrain(pi)], axis=-1)

    def split(self, theta):
        theta = np.asarray(theta, float)
        return theta[..., : self.K], theta[..., self.K :]

    def constrain(self, theta) -> dict:
        a, b = self.split(theta)
        return {"mu": tr.ordered_constrain(a), "pi": tr.simplex_constrain(b)}

    def unconstrain(self, mu, pi) -> np.ndarray:
        return np.concatenate([tr.ordered_unconstrain(mu), tr.simplex_unconstrain(pi)], axis=-1)

    def display(self, theta) -> np.ndarray:
        c = self.constrain(theta)
        return np.concatenate([c["mu"], c["pi"]], axis=-1)

    def sample_context(self, rng):
        N = int(rng.integers(self.cfg.n_range[0], self.cfg.n_range[1] + 1))
        P = int(rng.integers(self.cfg.p_range[0], self.cfg.p_range[1] + 1))
        return N, np.full(N, P)

    def simulate_from(self, theta, rng, N=None, P=None):
        theta = np.asarray(theta, float)
        n0, p0 = self.sample_context(rng)
        N = n0 if N is None else int(N)
        P = np.full(N, p0[0]) if P is None else np.broadcast_to(np.asarray(P, int), (N,))
        c = self.constrain(theta)
        z = rng.choice(self.K, size=N, p=c["pi"]) + 1
        units = _normal_units(c["mu"][z - 1], P, self.cfg.sigma, rng)
        return Dataset(self.name, units, z, theta)

    def log_prior(self, theta):
        a, b = self.split(theta)
        mu = tr.ordered_constrain(a)
        pi = tr.simplex_constrain(b)
        lp = np.sum(stats.norm.logpdf(mu, self.cfg.mu_loc, self.cfg.mu_scale), axis=-1)
        lp = lp + _dirichlet_logpdf(pi, self.cfg.concentration)
        return lp + tr.ordered_log_jacobian(a) + tr.simplex_log_jacobian(b)

    def log_emissions(self, d: Dataset, theta) -> np.ndarray:
        return _normal_unit_loglik(d.units, self.constrain(theta)["mu"], self.cfg.sigma)

    def weights(self, theta) -> np.ndarray:
        return self.constrain(theta)["pi"]


class HmmModel(Model):
    name = "hmm"
    dependent = True
    config_cls = HmmConfig

    def __init__(self, cfg: HmmConfig | None = None):
        super().__init__(cfg)
        self.K = self.cfg.K
        if self.K < 2 or len(self.cfg.mu_loc) != self.K:
            raise ValueError("HMM needs K >= 2 and K prior locations")
        self.D = self.K + self.K * (self.K - 1)
        self.param_names = [f"mu{k + 1}" for k in range(self.K)] + [f"a{k + 1}{k + 1}" for k in range(self.K)]

    def sample_theta(self, rng):
        mu, _ = tr.sample_ordered_normal(self.cfg.mu_loc, self.cfg.mu_scale, rng)
        rows = [tr.simplex_unconstrain(tr.clamp_simplex(rng.dirichlet(self.cfg.concentration)))
                for _ in range(self.K)]
        return np.concatenate([tr.ordered_unconstrain(mu)] + rows)

    def sample_prior(self, rng, M):
        mu, _ = tr.sample_ordered_normal(self.cfg.mu_loc, self.cfg.mu_scale, rng, size=M)
        rows = [tr.simplex_unconstrain(tr.clamp_simplex(rng.dirichlet(self.cfg.concentration, size=M)))
                for _ in range(self.K)]
        return np.concatenate([tr.ordered_unconstrain(mu)] + rows, axis=-1)

    def constrain(self, theta) -> dict:
        theta = np.asarray(theta, float)
        K = self.K
        mu = tr.ordered_constrain(theta[..., :K])
        rows = [tr.simplex_constrain(theta[..., K + k * (K - 1): K + (k + 1) * (K - 1)]) for k in range(K)]
        return {"mu": mu, "trans": np.stack(rows, axis=-2)}

    def display(self, theta) -> np.ndarray:
        c = self.constrain(theta)
        diag = np.diagonal(c["trans"], axis1=-2, axis2=-1)
        return np.concatenate([c["mu"], diag], axis=-1)

    def sample_context(self, rng):
        N = int(rng.integers(self.cfg.n_range[0], self.cfg.n_range[1] + 1))
        P = rng.integers(self.cfg.p_range[0], self.cfg.p_range[1] + 1, size=N)
        return N, P

    def simulate_from(self, theta, rng, N=None, P=None):
        theta = np.asarray(theta, float)
        N0, P0 = self.sample_context(rng)
        N = N0 if N is None else int(N)
        if P is None:
            P = P0 if len(P0) == N else rng.integers(self.cfg.p_range[0], self.cfg.p_range[1] + 1, size=N)
        P = np.broadcast_to(np.asarray(P, int), (N,))
        c = self.constrain(theta)
        z = markov_chain(np.asarray(self.cfg.init), c["trans"], N, rng)
        units = _normal_units(c["mu"][z - 1], P, self.cfg.sigma, rng)
        return Dataset(self.name, units, z, theta)

    def log_prior(self, theta):
        theta = np.asarray(theta, float)
        K = self.K
        a = theta[..., :K]
        lp = np.sum(stats.norm.logpdf(tr.ordered_constrain(a), self.cfg.mu_loc, self.cfg.mu_scale), axis=-1)
        lp = lp + tr.ordered_log_jacobian(a)
        for k in range(K):
            r = theta[..., K + k * (K - 1): K + (k + 1) * (K - 1)]
            lp = lp + _dirichlet_logpdf(tr.simplex_constrain(r), self.cfg.concentration) + tr.simplex_log_jacobian(r)
        return lp

    def log_emissions(self, d: Dataset, theta) -> np.ndarray:
        return _normal_unit_loglik(d.units, self.constrain(theta)["mu"], self.cfg.sigma)

    def init_probs(self, theta):
        return np.asarray(self.cfg.init, float)

    def transition(self, theta):
        return self.constrain(theta)["trans"]


class DecisionModel(Model):
    """Guessing (state 1) versus controlled (state 2) responding."""

    name = "decision"
    K = 2
    obs_dim = 2
    dependent = True
    uses_local = False
    config_cls = DecisionConfig
    D = 8
    param_names = ["rho11", "rho22", "alpha1", "nu1", "alpha2", "nu21", "nu22", "tau"]

    def sample_theta(self, rng):
        c = self.cfg
        rows = [tr.simplex_unconstrain(tr.clamp_simplex(rng.dirichlet(c.concentration))) for _ in range(2)]
        pos = [
            truncated_normal(*c.alpha1, rng),
            truncated_normal(*c.nu1, rng),
            truncated_normal(*c.alpha_gap, rng),
            truncated_normal(*c.nu21, rng),
            truncated_normal(*c.nu_gap, rng),
            max(rng.exponential(1.0 / c.tau_rate), 1e-300),
        ]
        return np.concatenate(rows + [np.log(pos)])

    def sample_prior(self, rng, M):
        c = self.cfg
        rows = [tr.simplex_unconstrain(tr.clamp_simplex(rng.dirichlet(c.concentration, size=M))) for _ in range(2)]
        pos = [truncated_normal_many(*v, rng, M) for v in (c.alpha1, c.nu1, c.alpha_gap, c.nu21, c.nu_gap)]
        pos.append(np.maximum(rng.exponential(1.0 / c.tau_rate, size=M), 1e-300))
        return np.concatenate(rows + [np.log(np.stack(pos, axis=-1))], axis=-1)

    def constrain(self, theta) -> dict:
        theta = np.asarray(theta, float)
        rows = np.stack([tr.simplex_constrain(theta[..., 0:1]), tr.simplex_constrain(theta[..., 1:2])], axis=-2)
        a1, n1, ag, n21, ng, tau = (np.exp(theta[..., 2 + i]) for i in range(6))
        return {"trans": rows, "alpha1": a1, "nu1": n1, "alpha2": a1 + ag, "nu21": n21,
                "nu22": n21 + ng, "tau": tau}

    def display(self, theta) -> np.ndarray:
        c = self.constrain(theta)
        return np.stack([c["trans"][..., 0, 0], c["trans"][..., 1, 1], c["alpha1"], c["nu1"], c["alpha2"],
                         c["nu21"], c["nu22"], c["tau"]], axis=-1)

    def sample_context(self, rng):
        N = int(rng.integers(self.cfg.n_range[0], self.cfg.n_range[1] + 1))
        return N, np.ones(N, int)

    def context(self, N, P):
        return np.array([float(N)])

    def batch_context(self, batch):
        return batch.n.astype(float)[:, None]

    def simulate_from(self, theta, rng, N=None, P=None):
        theta = np.asarray(theta, float)
        N0, _ = self.sample_context(rng)
        N = N0 if N is None else int(N)
        c = self.constrain(theta)
        z = markov_chain(np.asarray(self.cfg.init), c["trans"], N, rng)
        # both emission routes are drawn for every trial, then selected by state
        rt_g = wald_sample(c["alpha1"], c["nu1"], c["tau"], rng, size=N)
        ch_g = 1 + (rng.uniform(size=N) < 0.5)
        rt_c, ch_c = rdm_sample(c["alpha2"], c["nu21"], c["nu22"], c["tau"], rng, size=N)
        guess = z == 1
        obs = np.stack([np.where(guess, rt_g, rt_c), np.where(guess, ch_g, ch_c).astype(float)], axis=-1)
        return Dataset(self.name, list(obs[:, None, :]), z, theta)

    def log_prior(self, theta):
        theta = np.asarray(theta, float)
        c = self.cfg
        lp = 0.0
        for k in range(2):
            r = theta[..., k: k + 1]
            lp = lp + _dirichlet_logpdf(tr.simplex_constrain(r), c.concentration) + tr.simplex_log_jacobian(r)
        for i, (loc, sc) in enumerate([c.alpha1, c.nu1, c.alpha_gap, c.nu21, c.nu_gap]):
            x = theta[..., 2 + i]
            lp = lp + stats.norm.logpdf(np.exp(x), loc, sc) - stats.norm.logsf(0.0, loc, sc) + x
        x = theta[..., 7]
        return lp + math.log(c.tau_rate) - c.tau_rate * np.exp(x) + x

    def log_emissions(self, d: Dataset, theta) -> np.ndarray:
        from .oracles import decision_loglik

        rt = np.array([u[0, 0] for u in d.units])
        ch = np.array([u[0, 1] for u in d.units]).astype(int)
        c = self.constrain(theta)
        ex = (lambda v: np.asarray(v)[..., None])
        cols = [decision_loglik(rt, ch, s, {k: ex(v) for k, v in c.items() if k != "trans"}) for s in (1, 2)]
        return np.stack(cols, axis=-1)

    def init_probs(self, theta):
        return np.asarray(self.cfg.init, float)

    def transition(self, theta):
        return self.constrain(theta)["trans"]


class ToyModel(Model):
    """theta ~ N(m0, s0^2); y_j ~ N(theta, sigma^2), j = 1..n."""

    name = "toy"
    K = 1
    D = 1
    uses_local = False
    config_cls = ToyConfig
    param_names = ["theta"]

    def sample_theta(self, rng):
        return np.array([self.cfg.prior_loc + self.cfg.prior_scale * rng.standard_normal()])

    def sample_prior(self, rng, M):
        return self.cfg.prior_loc + self.cfg.prior_scale * rng.standard_normal((M, 1))

    def constrain(self, theta):
        return {"theta": np.asarray(theta, float)[..., 0]}

    def display(self, theta):
        return np.asarray(theta, float)

    def sample_context(self, rng):
        N = int(rng.integers(self.cfg.n_range[0], self.cfg.n_range[1] + 1))
        return N, np.ones(N, int)

    def context(self, N, P):
        return np.array([float(N)])

    def batch_context(self, batch):
        return batch.n.astype(float)[:, None]

    def simulate_from(self, theta, rng, N=None, P=None):
        theta = np.asarray(theta, float)
        N = self.sample_context(rng)[0] if N is None else int(N)
        y = theta[0] + self.cfg.sigma * rng.standard_normal(N)
        return Dataset(self.name, list(y[:, None, None]), np.ones(N, int), theta)

    def log_prior(self, theta):
        return stats.norm.logpdf(np.asarray(theta, float)[..., 0], self.cfg.prior_loc, self.cfg.prior_scale)

    def log_emissions(self, d, theta):
        return _normal_unit_loglik(d.units, np.asarray(theta, float)[..., :1], self.cfg.sigma)

    def weights(self, theta):
        return np.ones(np.shape(theta)[:-1] + (1,))

    def analytic_posterior(self, d: Dataset) -> tuple[float, float]:
        """Closed-form normal posterior (mean, sd) for this dataset."""
        y = np.concatenate([u[:, 0] for u in d.units])
        prec = 1 / self.cfg.prior_scale**2 + len(y) / self.cfg.sigma**2
        m = (self.cfg.prior_loc / self.cfg.prior_scale**2 + y.sum() / self.cfg.sigma**2) / prec
        return float(m), float(1 / math.sqrt(prec))


MODELS = {"gmm": GmmModel, "hmm": HmmModel, "decision": DecisionModel, "toy": ToyModel}
MODEL_ALIASES = {"conjugate-toy": "toy"}


def make_model(name: str, **overrides) -> Model:
    name = MODEL_ALIASES.get(name, name)
    try:
        cls = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    cfg = cls.config_cls()
    for k, v in overrides.items():
        if not hasattr(cfg, k):
            raise ValueError(f"{name} config has no field {k!r}")
        cur = getattr(cfg, k)
        setattr(cfg, k, tuple(v) if isinstance(cur, tuple) else type(cur)(v))
    return cls(cfg)


def model_config(model: Model) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(model.cfg).items()}


def simulate_gmm(cfg: GmmConfig, B: int, seed: int, start: int = 0) -> SimBatch:
    return GmmModel(cfg).simulate_batch(B, seed, start)


def simulate_hmm(cfg: HmmConfig, B: int, seed: int, start: int = 0) -> SimBatch:
    return HmmModel(cfg).simulate_batch(B, seed, start)


def simulate_decision(cfg: DecisionConfig, B: int, seed: int, start: int = 0) -> SimBatch:
    return DecisionModel(cfg).simulate_batch(B, seed, start)


# --------------------------------------------------------------------------
# dataset files


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def dataset_to_json(d: Dataset, path, provenance: dict | None = None):
    doc = {
        "meta": {"model": d.model, "N": d.N, "P": [int(p) for p in d.P]},
        "units": [{"id": i + 1, "observations": [[float(_fmt(v)) for v in row] for row in u]}
                  for i, u in enumerate(d.units)],
    }
    if d.z is not None:
        doc["meta"]["z"] = [int(v) for v in d.z]
    if d.theta is not None:
        doc["meta"]["theta"] = [float(v) for v in d.theta]
    if provenance:
        doc["provenance"] = provenance
    Path(path).write_text(json.dumps(doc, indent=1))


def dataset_from_json(path) -> Dataset:
    doc = json.loads(Path(path).read_text())
    meta = doc["meta"]
    units = [np.array(u["observations"], dtype=float).reshape(len(u["observations"]), -1)
             for u in sorted(doc["units"], key=lambda u: u["id"])]
    z = np.array(meta["z"]) if "z" in meta else None
    theta = np.array(meta["theta"]) if "theta" in meta else None
    return Dataset(meta["model"], units, z, theta)


def dataset_to_csv(d: Dataset, path, header_lines: list[str] = ()):
    cols = ["value"] if d.units[0].shape[1] == 1 else ["rt", "choice"][: d.units[0].shape[1]]
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(f"# model={d.model}\n")
        w = csv.writer(fh)
        w.writerow(["unit_id", "obs_index"] + cols)
        for i, u in enumerate(d.units):
            for j, row in enumerate(u):
                w.writerow([i + 1, j + 1] + [_fmt(v) for v in row])


def dataset_from_csv(path, model: str | None = None) -> Dataset:
    rows: dict[int, list] = {}
    with open(path) as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                if line.startswith("# model=") and model is None:
                    model = line.strip().split("=", 1)[1]
                continue
            lines.append(line)
    reader = csv.reader(lines)
    next(reader)
    for r in reader:
        rows.setdefault(int(r[0]), []).append((int(r[1]), [float(v) for v in r[2:]]))
    units = [np.array([v for _, v in sorted(rows[k])]) for k in sorted(rows)]
    return Dataset(model or "unknown", units)
