"""Figure rendering for the CLI ``--figures`` flag.

Every figure is drawn from the same arrays that go into the CSV outputs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "axes": dict(labelsize=8, titlesize=8, linewidth=0.6, spines_top=False, spines_right=False),
    "figure": dict(dpi=110, facecolor="white", constrained_layout_use=True),
    "font": dict(size=8),
    "legend": dict(fontsize=7, frameon=False),
    "lines": dict(linewidth=0.9),
    "xtick": dict(labelsize=7),
    "ytick": dict(labelsize=7),
    "savefig": dict(dpi=200),
}
BAND = "#c9d6e3"
LINE = "#1f4e79"


def _style():
    ctx = {}
    for group, vals in RC.items():
        for k, v in vals.items():
            key = "constrained_layout.use" if k == "constrained_layout_use" else k.replace("_", ".")
            ctx[f"{group}.{key}"] = v
    return plt.rc_context(ctx)


def _grid(n: int, width: float = 2.2):
    cols = min(n, 4)
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(width * cols, width * 0.85 * rows), squeeze=False)
    for ax in axes.flat[n:]:
        ax.set_visible(False)
    return fig, axes.flat


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def sbc_curves(report, path) -> Path:
    """ECDF difference of each parameter's fractional ranks with the simultaneous band."""
    b = report.band
    diff = report.ecdf_diff()
    with _style():
        fig, axes = _grid(len(report.names))
        for ax, name, d, ok in zip(axes, report.names, diff, report.inside):
            ax.fill_between(b.grid, b.lower - b.expected, b.upper - b.expected, color=BAND, lw=0)
            ax.step(b.grid, d, where="post", color=LINE if ok else "firebrick")
            ax.axhline(0, color="0.5", lw=0.5)
            ax.set_title(name)
            ax.set_xlabel("fractional rank")
        axes[0].set_ylabel("ECDF difference")
        return _save(fig, path)


def recovery_scatter(rec, path) -> Path:
    """Posterior medians (with central intervals) against the true values."""
    with _style():
        fig, axes = _grid(len(rec.names))
        r = rec.correlation()
        for k, (ax, name) in enumerate(zip(axes, rec.names)):
            t, m = rec.truth[:, k], rec.median[:, k]
            ax.errorbar(t, m, yerr=[m - rec.lower[:, k], rec.upper[:, k] - m], fmt="o", ms=1.5,
                        color=LINE, ecolor=BAND, elinewidth=0.6)
            lo, hi = min(t.min(), m.min()), max(t.max(), m.max())
            ax.plot([lo, hi], [lo, hi], color="0.5", lw=0.5, ls="--")
            ax.set_title(f"{name}  r = {r[k]:.2f}")
            ax.set_xlabel("true")
        axes[0].set_ylabel("posterior median")
        return _save(fig, path)


def class_bands(cp, path, truth=None) -> Path:
    """Median membership probability per unit with 95% bands, one panel per state."""
    q = cp.summary()
    N, K = q.shape[:2]
    x = np.arange(1, N + 1)
    with _style():
        fig, axes = plt.subplots(K, 1, figsize=(6.0, 1.4 * K), sharex=True, squeeze=False)
        for k, ax in enumerate(axes[:, 0]):
            ax.fill_between(x, q[:, k, 0], q[:, k, 2], color=BAND, lw=0, step="mid")
            ax.step(x, q[:, k, 1], where="mid", color=LINE)
            if truth is not None:
                ax.plot(x, truth[:, k], color="firebrick", lw=0.6)
            ax.set_ylim(-0.02, 1.02)
            ax.set_ylabel(f"state {k + 1}")
        axes[-1, 0].set_xlabel("unit")
        axes[0, 0].set_title(cp.mode.replace("_", " "))
        return _save(fig, path)


def posterior_pairs(draws, path, max_points: int = 2000) -> Path:
    """Marginal histograms on the diagonal, scatter of a draw subsample below it."""
    x = np.asarray(draws.constrained)[:max_points]
    names = list(draws.names)[: x.shape[1]]
    D = x.shape[1]
    with _style():
        fig, axes = plt.subplots(D, D, figsize=(1.3 * D, 1.3 * D), squeeze=False)
        for i in range(D):
            for j in range(D):
                ax = axes[i, j]
                if j > i:
                    ax.set_visible(False)
                elif i == j:
                    ax.hist(x[:, i], bins=30, color=LINE, alpha=0.8)
                    ax.set_yticks([])
                else:
                    ax.plot(x[:, j], x[:, i], ".", ms=0.8, color=LINE, alpha=0.4)
                if i == D - 1:
                    ax.set_xlabel(names[j])
                if j == 0 and i > 0:
                    ax.set_ylabel(names[i])
        return _save(fig, path)


def loss_trace(trace, path) -> Path:
    """Per-term training loss, smoothed by a running mean."""
    keys = sorted({k for r in trace for k in r.terms})
    it = np.array([r.iteration + 1 for r in trace])
    with _style():
        fig, ax = plt.subplots(figsize=(4.5, 2.6))
        w = max(1, len(trace) // 100)
        for k in keys:
            v = np.array([r.terms.get(k, np.nan) for r in trace])
            sm = np.convolve(v, np.ones(w) / w, mode="valid")
            ax.plot(it[w - 1:], sm, label=k)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend()
        return _save(fig, path)


def mmd_null(report, path) -> Path:
    with _style():
        fig, ax = plt.subplots(figsize=(3.5, 2.4))
        ax.hist(report.null_statistics, bins=30, color=BAND)
        ax.axvline(report.statistic, color="firebrick")
        ax.set_xlabel("MMD statistic")
        ax.set_title(f"p = {report.p_value:.3f}")
        return _save(fig, path)
