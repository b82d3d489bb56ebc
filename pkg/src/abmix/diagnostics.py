"""Validation battery for trained approximators.

Calibration (rank statistics with a simultaneous ECDF band), parameter
recovery, a kernel test for simulation gaps in summary space, Pareto-smoothed
importance weights and posterior predictive p-values.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from .oracles import lse, marginal_loglik, class_probs
from .simulators import Dataset, Model

log = logging.getLogger(__name__)

KHAT_THRESHOLD = 0.7


def sbc_view(model: Model, theta) -> np.ndarray:
    """The D free parameters on their natural scale (drops the redundant last
    mixture weight of the gmm)."""
    return np.asarray(model.display(theta))[..., : model.D]


# --------------------------------------------------------------------------
# rank statistics


def fractional_ranks(truths, draws) -> np.ndarray:
    """rank = #{draws < truth} / S per replicate and dimension.

    ``truths`` is (R, D), ``draws`` is (R, S, D).
    """
    truths, draws = np.asarray(truths, float), np.asarray(draws, float)
    if truths.ndim == 1:
        truths = truths[:, None]
        draws = draws[..., None]
    return (draws < truths[:, None, :]).sum(axis=1) / draws.shape[1]


def _pointwise_pvalues(counts: np.ndarray, R: int, p: np.ndarray) -> np.ndarray:
    """Two-sided binomial tail probabilities of ECDF counts at each grid point."""
    lo = stats.binom.cdf(counts, R, p)
    hi = stats.binom.sf(counts - 1, R, p)
    return np.minimum(1.0, 2 * np.minimum(lo, hi))


@dataclass
class EcdfBand:
    """Simultaneous band for the ECDF of R discrete fractional ranks (S draws).

    The pointwise level ``gamma`` is tuned by simulating ``n_sim`` sets of
    exactly uniform ranks, so that the whole curve stays inside with
    probability ``level``.
    """

    R: int
    S: int
    grid: np.ndarray
    expected: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    gamma: float
    level: float

    @classmethod
    def calibrate(cls, R: int, S: int, level: float = 0.95, n_sim: int = 1000, n_grid: int | None = None,
                  rng: np.random.Generator | None = None) -> "EcdfBand":
        rng = np.random.default_rng(0) if rng is None else rng
        n_grid = min(R, 100) if n_grid is None else n_grid
        grid = np.arange(1, n_grid) / n_grid
        # P(rank <= x) when the count is uniform on 0..S
        expected = (np.floor(grid * S) + 1) / (S + 1)
        sims = rng.integers(0, S + 1, size=(n_sim, R)) / S
        counts = (sims[:, :, None] <= grid).sum(axis=1)
        min_p = _pointwise_pvalues(counts, R, expected).min(axis=1)
        gamma = float(np.quantile(min_p, 1 - level, method="lower"))
        k = np.arange(R + 1)[:, None]
        ok = _pointwise_pvalues(k, R, expected[None, :]) > gamma
        lower = np.array([k[ok[:, j], 0].min() for j in range(len(grid))]) / R
        upper = np.array([k[ok[:, j], 0].max() for j in range(len(grid))]) / R
        return cls(R, S, grid, expected, lower, upper, gamma, level)

    def ecdf(self, ranks) -> np.ndarray:
        ranks = np.asarray(ranks, float)
        return (ranks[..., :, None] <= self.grid).mean(axis=-2)

    def contains(self, ranks):
        """Whether the ECDF of each rank column lies inside the band."""
        r = np.asarray(ranks, float)
        cols = r[:, None] if r.ndim == 1 else r
        F = np.stack([self.ecdf(c) for c in cols.T])
        ok = np.all((F >= self.lower - 1e-12) & (F <= self.upper + 1e-12), axis=-1)
        return bool(ok[0]) if r.ndim == 1 else ok


@dataclass
class SbcReport:
    names: list
    ranks: np.ndarray  # (R, D)
    band: EcdfBand
    provenance: dict = field(default_factory=dict)

    @property
    def inside(self) -> np.ndarray:
        return np.atleast_1d(self.band.contains(self.ranks))

    @property
    def passed(self) -> bool:
        return bool(np.all(self.inside))

    def ecdf_diff(self) -> np.ndarray:
        """(D, G) ECDF minus expected CDF on the band grid."""
        return np.stack([self.band.ecdf(r) for r in self.ranks.T]) - self.band.expected

    def to_dict(self) -> dict:
        return {
            "R": int(self.ranks.shape[0]), "S": self.band.S, "level": self.band.level, "gamma": self.band.gamma,
            "parameters": {n: {"inside_band": bool(ok), "ks_pvalue": float(stats.kstest(r, "uniform").pvalue)}
                           for n, ok, r in zip(self.names, self.inside, self.ranks.T)},
            "passed": self.passed, "provenance": self.provenance,
        }

    def write(self, outdir, header_lines=()) -> list[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = [outdir / "sbc_report.json", outdir / "sbc_ranks.csv", outdir / "sbc_curves.csv"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        with open(paths[1], "w", newline="") as fh:
            _header(fh, header_lines)
            w = csv.writer(fh)
            w.writerow(["replicate"] + list(self.names))
            for i, row in enumerate(self.ranks):
                w.writerow([i + 1] + [format(v, ".6g") for v in row])
        diff = self.ecdf_diff()
        with open(paths[2], "w", newline="") as fh:
            _header(fh, header_lines)
            w = csv.writer(fh)
            w.writerow(["parameter", "rank_grid", "ecdf_diff", "band_lo", "band_hi"])
            b = self.band
            for n, d in zip(self.names, diff):
                for j, x in enumerate(b.grid):
                    w.writerow([n, format(x, ".6g"), format(d[j], ".6g"), format(b.lower[j] - b.expected[j], ".6g"),
                                format(b.upper[j] - b.expected[j], ".6g")])
        return paths


def sbc_run(model: Model, approximator: Callable, R: int, S: int, rng: np.random.Generator,
            band: EcdfBand | None = None, simulate_kw: dict | None = None) -> tuple[SbcReport, dict]:
    """Simulation-based calibration.

    ``approximator(datasets, S, rng)`` returns unconstrained draws of shape
    (len(datasets), S, D).  Returns the report plus the raw material
    (truths, draws, datasets) for recovery statistics.
    """
    theta = model.sample_prior(rng, R)
    datasets = [model.simulate_from(t, rng, **(simulate_kw or {})) for t in theta]
    draws = np.asarray(approximator(datasets, S, rng), float)
    if draws.shape != (R, S, model.D):
        raise ValueError(f"approximator returned {draws.shape}, expected {(R, S, model.D)}")
    truths_v, draws_v = sbc_view(model, theta), sbc_view(model, draws)
    band = band or EcdfBand.calibrate(R, S, rng=np.random.default_rng(rng.integers(2**63)))
    report = SbcReport(list(model.param_names[: model.D]), fractional_ranks(truths_v, draws_v), band)
    return report, {"theta": theta, "truths": truths_v, "draws": draws_v, "datasets": datasets}


def amortized_approximator(am, seed: int = 0):
    """Wrap a trained model as an ``sbc_run`` approximator."""
    def approx(datasets, S, rng):
        return np.stack([d.unconstrained for d in am.sample_many(datasets, S, seed=seed)])
    return approx


# --------------------------------------------------------------------------
# recovery


@dataclass
class RecoveryStats:
    names: list
    truth: np.ndarray  # (R, D)
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    z: np.ndarray  # nan where flagged
    contraction: np.ndarray
    flagged: np.ndarray  # zero posterior sd

    def correlation(self) -> np.ndarray:
        """Pearson correlation of posterior median with truth, per parameter."""
        return np.array([np.corrcoef(self.median[:, k], self.truth[:, k])[0, 1] for k in range(self.truth.shape[1])])

    def coverage(self) -> np.ndarray:
        return np.mean((self.truth >= self.lower) & (self.truth <= self.upper), axis=0)

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            _header(fh, header_lines)
            w = csv.writer(fh)
            w.writerow(["replicate", "parameter", "truth", "median", "ci_lo", "ci_hi", "z", "contraction"])
            for i in range(self.truth.shape[0]):
                for k, n in enumerate(self.names):
                    w.writerow([i + 1, n] + [format(v, ".8g") for v in (
                        self.truth[i, k], self.median[i, k], self.lower[i, k], self.upper[i, k], self.z[i, k],
                        self.contraction[i, k])])


def recovery_stats(truths, draws, prior_var, names=None, level: float = 0.95) -> RecoveryStats:
    """Posterior medians, central intervals, z-scores and contraction.

    z = (posterior mean - truth) / posterior sd and contraction
    1 - posterior var / prior var.  A zero posterior sd is flagged and its
    z-score left as nan.
    """
    truths = np.atleast_2d(np.asarray(truths, float))
    draws = np.asarray(draws, float)
    if draws.ndim == 2:
        draws = draws[None]
    a = (1 - level) / 2
    med = np.median(draws, axis=1)
    lo, hi = np.quantile(draws, [a, 1 - a], axis=1)
    mean, sd = draws.mean(axis=1), draws.std(axis=1)
    # identical draws can leave a rounding-level sd from the mean
    flagged = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(flagged, np.nan, (mean - truths) / np.where(flagged, 1.0, sd))
    contraction = 1 - np.where(flagged, 0.0, sd**2) / np.asarray(prior_var, float)
    names = list(names or [f"theta{k + 1}" for k in range(truths.shape[1])])
    return RecoveryStats(names, truths, med, lo, hi, mean, sd, z, contraction, flagged)


# --------------------------------------------------------------------------
# summary-space misspecification test


def median_bandwidth(x: np.ndarray) -> float:
    """Median pairwise Euclidean distance (the median heuristic)."""
    x = np.asarray(x, float)
    sq = np.sum(x * x, 1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    iu = np.triu_indices(len(x), 1)
    h = float(np.median(np.sqrt(d2[iu])))
    return h if h > 0 else 1.0


def _kmean(a: np.ndarray, b: np.ndarray, h: float) -> np.ndarray:
    d2 = np.sum(a * a, -1)[..., :, None] + np.sum(b * b, -1)[None, :] - 2 * a @ b.T
    return np.exp(-np.maximum(d2, 0.0) / (2 * h * h)).mean(-1)


@dataclass
class MisspecReport:
    statistic: float
    p_value: float
    M: int
    bandwidth: float
    null_statistics: np.ndarray = field(repr=False, default=None)

    def table_row(self) -> str:
        """'3.84, .025' style: two-decimal statistic, three-decimal p without the leading zero."""
        p = f"{self.p_value:.3f}"
        if p.startswith("0"):
            p = p[1:]
        return f"{self.statistic:.2f}, {p}"

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "M": self.M, "bandwidth": self.bandwidth,
                "row": self.table_row()}


def mmd_test(summary, null_summaries, reference=None, bandwidth: float | None = None,
             rng: np.random.Generator | None = None, n_reference: int = 1000) -> MisspecReport:
    """Compare an observed summary with the distribution of the same statistic
    over prior-predictive summaries.

    The statistic is the squared MMD between the observed summary (a single
    vector) and a fixed standard-normal reference cloud; every null replicate
    is scored identically.  p = (1 + #{null >= observed}) / (M + 1).
    """
    obs = np.atleast_2d(np.asarray(summary, float))
    null = np.asarray(null_summaries, float)
    M, G = null.shape
    if obs.shape != (1, G):
        raise ValueError(f"observed summary must have {G} entries")
    if M < 100:
        log.warning("only %d null replicates; p-value resolution is coarse", M)
    if reference is None:
        rng = np.random.default_rng(0) if rng is None else rng
        reference = rng.standard_normal((n_reference, G))
    reference = np.asarray(reference, float)
    h = median_bandwidth(null) if bandwidth is None else float(bandwidth)
    # MMD^2 of a one-point sample: k(s,s) = 1, the reference term is shared
    n = len(reference)
    kref = (_kmean(reference, reference, h).sum() * n - n) / (n * (n - 1))

    def stat(s):
        return 1.0 + kref - 2 * _kmean(s, reference, h)

    t_obs = float(stat(obs)[0])
    t_null = stat(null)
    p = (1 + int(np.sum(t_null >= t_obs))) / (M + 1)
    return MisspecReport(t_obs, p, M, h, t_null)


# --------------------------------------------------------------------------
# Pareto-smoothed importance sampling


def gpd_fit(x) -> tuple[float, float]:
    """Zhang-Stephens posterior-mean estimate of generalized Pareto (k, sigma)
    for positive exceedances ``x``, with the usual weak prior on k."""
    x = np.sort(np.asarray(x, float))
    n = len(x)
    m = 30 + int(math.sqrt(n))
    b = 1 - np.sqrt(m / (np.arange(1, m + 1) - 0.5))
    b = b / (3 * x[int(n / 4 + 0.5) - 1]) + 1 / x[-1]
    k = np.log1p(-b[:, None] * x).mean(axis=1)
    L = n * (np.log(-b / k) - k - 1)
    with np.errstate(over="ignore"):
        w = 1 / np.exp(L - L[:, None]).sum(axis=1)
    keep = w >= 10 * np.finfo(float).eps
    w, b = w[keep] / w[keep].sum(), b[keep]
    bhat = float(np.sum(b * w))
    khat = float(np.mean(np.log1p(-bhat * x)))
    sigma = -khat / bhat
    khat = (n * khat + 10 * 0.5) / (n + 10)
    return khat, sigma


def gpd_quantile(p, k: float, sigma: float) -> np.ndarray:
    p = np.asarray(p, float)
    if abs(k) < 1e-12:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


@dataclass
class PsisReport:
    pareto_k: float | None  # None when too few tail points
    weights: np.ndarray  # smoothed, normalized
    raw_weights: np.ndarray
    ess: float
    mean: np.ndarray
    raw_mean: np.ndarray
    quantiles: np.ndarray  # (3, D): 2.5/50/97.5%
    tail_length: int

    @property
    def flagged(self) -> bool:
        return self.pareto_k is not None and self.pareto_k > KHAT_THRESHOLD

    def to_dict(self, names=None) -> dict:
        names = list(names or [f"theta{k + 1}" for k in range(len(self.mean))])
        return {"pareto_k": self.pareto_k, "flag": self.flagged, "threshold": KHAT_THRESHOLD, "ess": self.ess,
                "tail_length": self.tail_length,
                "corrected_mean": dict(zip(names, map(float, self.mean))),
                "raw_mean": dict(zip(names, map(float, self.raw_mean))),
                "corrected_quantiles": {n: [float(v) for v in self.quantiles[:, i]] for i, n in enumerate(names)}}


def psis_smooth(log_ratios) -> tuple[np.ndarray, float | None, int]:
    """Smoothed normalized log-weights, k-hat (None if unavailable) and tail size."""
    r = np.asarray(log_ratios, float)
    S = len(r)
    x = r - r.max()
    if np.ptp(x) < 1e-10:
        # constant ratios: nothing to smooth
        return np.full(S, -math.log(S)), 0.0, 0
    M = int(math.ceil(min(0.2 * S, 3 * math.sqrt(S))))
    order = np.argsort(x, kind="stable")
    cutoff = max(x[order[-M - 1]], math.log(np.finfo(float).tiny)) if M < S else -np.inf
    tail = np.nonzero(x > cutoff)[0]
    khat = None
    if len(tail) >= 5:
        tail = tail[np.argsort(x[tail], kind="stable")]
        exc = np.exp(x[tail]) - math.exp(cutoff)
        khat, sigma = gpd_fit(exc)
        if np.isfinite(khat):
            q = gpd_quantile((np.arange(len(tail)) + 0.5) / len(tail), khat, sigma)
            x = x.copy()
            x[tail] = np.log(q + math.exp(cutoff))
            x = np.minimum(x, 0.0)
    return x - lse(x), khat, len(tail)


def psis_correct(draws, log_q, log_joint) -> PsisReport:
    """Importance-reweight approximate posterior draws toward the exact posterior.

    ``draws`` is (S, D) (or a PosteriorDraws, whose constrained view is
    summarized); log-ratios are ``log_joint - log_q``.
    """
    values = np.asarray(getattr(draws, "constrained", draws), float)
    if values.ndim == 1:
        values = values[:, None]
    r = np.asarray(log_joint, float) - np.asarray(log_q, float)
    if not np.all(np.isfinite(r)):
        # zero-density draws receive zero weight
        r = np.where(np.isfinite(r), r, -np.inf)
        if not np.any(np.isfinite(r)):
            raise ValueError("no draw has finite importance ratio")
    finite = np.isfinite(r)
    lw = np.full(len(r), -np.inf)
    sm, khat, tail_len = psis_smooth(r[finite])
    lw[finite] = sm
    w = np.exp(lw)
    w = w / w.sum()
    raw = np.exp(r - lse(r[finite]))
    raw = raw / raw.sum()
    qs = np.stack([_wquantile(values[:, d], w, [0.025, 0.5, 0.975]) for d in range(values.shape[1])], axis=1)
    return PsisReport(khat, w, raw, float(1 / np.sum(w**2)), w @ values, values.mean(0), qs, tail_len)


def _wquantile(x, w, qs) -> np.ndarray:
    o = np.argsort(x)
    c = np.cumsum(w[o])
    c = c / c[-1]
    return np.array([x[o][min(np.searchsorted(c, q), len(x) - 1)] for q in qs])


def log_joint(model: Model, d: Dataset, theta) -> np.ndarray:
    """log p(y | theta) + log p(theta) on the unconstrained scale."""
    theta = np.atleast_2d(theta)
    return marginal_loglik(model, d, theta) + model.log_prior(theta)


# --------------------------------------------------------------------------
# posterior predictive checks


def ppc_statistics(model: Model, d: Dataset, theta) -> dict[str, float]:
    """Test quantities: mean and sd of all observations, per-state occupancy
    (average exact membership probability under ``theta``), and accuracy
    (share of choice 2) for the decision model."""
    y = np.concatenate([u[:, 0] for u in d.units])
    out = {"mean": float(y.mean()), "sd": float(y.std())}
    if model.name == "decision":
        ch = np.concatenate([u[:, 1] for u in d.units])
        out["accuracy"] = float(np.mean(ch == 2))
    if model.K > 1:
        mode = "smooth" if model.dependent else "independent"
        occ = class_probs(model, d, theta, mode).mean(axis=0)
        for k in range(model.K):
            out[f"occupancy_{k + 1}"] = float(occ[k])
    return out


@dataclass
class PpcTable:
    names: list
    observed: np.ndarray  # (S, T) observed statistic per draw (theta-dependent ones vary)
    replicated: np.ndarray  # (S, T)
    p_values: np.ndarray

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            _header(fh, header_lines)
            w = csv.writer(fh)
            w.writerow(["statistic", "observed_mean", "replicated_mean", "replicated_sd", "p_value"])
            for i, n in enumerate(self.names):
                w.writerow([n, format(self.observed[:, i].mean(), ".8g"), format(self.replicated[:, i].mean(), ".8g"),
                            format(self.replicated[:, i].std(), ".8g"), format(self.p_values[i], ".4f")])

    def to_dict(self) -> dict:
        return {n: float(p) for n, p in zip(self.names, self.p_values)}


def ppc_pvalues(t_obs, t_rep) -> np.ndarray:
    """P(T_rep >= T_obs) with ties counted one half."""
    t_obs, t_rep = np.asarray(t_obs, float), np.asarray(t_rep, float)
    return np.mean((t_rep > t_obs) + 0.5 * (t_rep == t_obs), axis=0)


def ppc_summary(draws, model: Model, observed: Dataset, rng: np.random.Generator) -> PpcTable:
    """Replicate the observed design once per posterior draw and compare test quantities."""
    theta = np.atleast_2d(getattr(draws, "unconstrained", draws))
    obs_rows, rep_rows = [], []
    for t in theta:
        rep = model.simulate_from(t, rng, N=observed.N, P=observed.P)
        obs_rows.append(ppc_statistics(model, observed, t))
        rep_rows.append(ppc_statistics(model, rep, t))
    names = list(obs_rows[0])
    t_obs = np.array([[r[n] for n in names] for r in obs_rows])
    t_rep = np.array([[r[n] for n in names] for r in rep_rows])
    return PpcTable(names, t_obs, t_rep, ppc_pvalues(t_obs, t_rep))


def _header(fh, lines):
    for line in lines:
        fh.write(f"# {line}\n")
