"""Figure rendering for the report path.

Every CLI command that emits delimited results can also render the
matching matplotlib figure next to it.  Figures are written to files
only (PNG, no interactive backends) with empty metadata so repeated runs
produce byte-stable artifacts.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches="tight", metadata={})
    plt.close(fig)
    return path


def marginal_comparison(path, support, series: dict, title: str, xlabel: str = "count"):
    """Overlay marginal distributions; series maps label -> probabilities."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    styles = ["-", "--", ":", "-."]
    for (label, probs), ls in zip(series.items(), styles * 3):
        ax.plot(support, probs, ls, lw=1.6, label=label, drawstyle="steps-mid")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("probability")
    ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def trajectory_fan(path, ens, species: int = 0, max_shown: int = 300, title: str = ""):
    """First trajectories of an ensemble plus the ensemble mean."""
    fig, ax = plt.subplots(figsize=(5.6, 3.4))
    shown = min(ens.n_traj, max_shown)
    for k in range(shown):
        ax.plot(ens.grid, ens.states[k, :, species], color="C0", alpha=0.05, lw=0.7)
    mean, std = ens.mean_std()
    ax.plot(ens.grid, mean[:, species], color="C3", lw=1.8, label="ensemble mean")
    ax.fill_between(
        ens.grid,
        mean[:, species] - std[:, species],
        mean[:, species] + std[:, species],
        color="C3",
        alpha=0.15,
        lw=0,
    )
    ax.set_xlabel("time")
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def heatmap(path, grid_x, grid_y, values, xlabel: str, ylabel: str, title: str, log_color: bool = False):
    """Dense 2-d field (sweep results, joint distributions)."""
    fig, ax = plt.subplots(figsize=(4.6, 3.8))
    vals = np.asarray(values, dtype=np.float64)
    if log_color:
        with np.errstate(divide="ignore"):
            vals = np.log10(np.where(vals > 0, vals, np.nan))
    im = ax.pcolormesh(grid_x, grid_y, vals, shading="nearest", cmap="viridis")
    fig.colorbar(im, ax=ax, label=("log10 " if log_color else "") + "value")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    return _save(fig, path)


def loss_trace(path, steps, kl, lr, title: str = "training loss"):
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(5.4, 4.2), sharex=True)
    ax1.plot(steps, kl, lw=0.8, color="C0")
    kl = np.asarray(kl, dtype=np.float64)
    if len(kl) >= 20:
        win = max(len(kl) // 50, 5)
        smooth = np.convolve(kl, np.ones(win) / win, mode="valid")
        ax1.plot(steps[win - 1 :], smooth, lw=1.6, color="C3", label=f"moving avg ({win})")
        ax1.legend(frameon=False, fontsize=8)
    ax1.set_ylabel("KL estimate")
    ax1.set_title(title)
    ax2.plot(steps, lr, lw=1.2, color="C2")
    ax2.set_ylabel("lr")
    ax2.set_xlabel("update")
    return _save(fig, path)


def chain_histograms(path, chain, truth: dict | None = None):
    """Histograms of visited rates, one panel per free symbol."""
    free = [s for s in chain.symbols if chain.proposal_std.get(s, 0.0) > 0]
    if not free:
        free = chain.symbols
    fig, axes = plt.subplots(1, len(free), figsize=(3.2 * len(free), 3.0), squeeze=False)
    for ax, sym in zip(axes[0], free):
        ax.hist(chain.rate_history(sym), bins=40, color="C0", alpha=0.8)
        if truth and sym in truth:
            ax.axvline(truth[sym], color="C3", ls="--", lw=1.4, label="truth")
            ax.legend(frameon=False, fontsize=8)
        ax.set_xlabel(sym)
    axes[0][0].set_ylabel("visits")
    fig.suptitle("inference chain", fontsize=10)
    return _save(fig, path)
