"""Distribution metrics and summary statistics.

hellinger implements sqrt(1 - sum sqrt(p*q)); bimodality_coefficient is
Sarle's sample statistic b = (g1^2 + 1) / (g2 + 3(n-1)^2 / ((n-2)(n-3)))
with bias-corrected sample skewness g1 and excess kurtosis g2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.stats import kurtosis, skew

from .errors import DegenerateVariance, SupportMismatch


def hellinger(p, q) -> float:
    """Hellinger distance between two distributions on the same support."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise SupportMismatch(f"supports differ: {p.shape} vs {q.shape}")
    if np.any(p < -1e-12) or np.any(q < -1e-12):
        raise ValueError("negative probabilities")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise ValueError("inputs must be normalized")
    bc = np.sum(np.sqrt(np.maximum(p, 0.0) * np.maximum(q, 0.0)))
    return float(np.sqrt(max(1.0 - min(bc, 1.0), 0.0)))


def hellinger_padded(p, q) -> float:
    """Hellinger distance with the shorter support zero-padded to match."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = max(len(p), len(q))
    return hellinger(
        np.pad(p, (0, n - len(p))),
        np.pad(q, (0, n - len(q))),
    )


def bimodality_coefficient(samples) -> float:
    """Sarle's bimodality coefficient of a 1-d sample (n >= 4).

    Uniform data approaches 5/9, normal data 1/3, a symmetric two-point
    mass approaches 1.  Raises DegenerateVariance when all samples agree.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    n = x.size
    if n < 4:
        raise ValueError("need at least 4 samples")
    if np.ptp(x) == 0.0 or np.var(x) == 0.0:
        raise DegenerateVariance("all samples identical")
    g1 = skew(x, bias=False)
    g2 = kurtosis(x, fisher=True, bias=False)
    corr = 3.0 * (n - 1) ** 2 / ((n - 2) * (n - 3))
    return float((g1**2 + 1.0) / (g2 + corr))


@dataclass
class Histogram2D:
    """Normalized joint histogram of a species pair on [0..U_i] x [0..U_j]."""

    axes: tuple[int, int]
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        total = self.probs.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"histogram mass {total!r} != 1")

    @classmethod
    def from_samples(cls, states, i: int, j: int, shape=None) -> "Histogram2D":
        states = np.asarray(states, dtype=np.int64)
        xi, xj = states[:, i], states[:, j]
        if shape is None:
            shape = (int(xi.max()) + 1, int(xj.max()) + 1)
        counts = np.zeros(shape)
        np.add.at(counts, (xi, xj), 1.0)
        return cls((i, j), counts / counts.sum())

    @classmethod
    def from_probability(cls, p, space, i: int, j: int) -> "Histogram2D":
        return cls((i, j), p.joint2d(space, i, j))


def mode_count(h: Histogram2D, window: int = 3, floor: float = 0.05) -> int:
    """Strict local maxima of the window-averaged grid above floor*max."""
    smooth = uniform_filter(h.probs, size=window, mode="constant")
    cut = floor * smooth.max()
    count = 0
    padded = np.pad(smooth, 1, mode="constant", constant_values=-np.inf)
    for a in range(smooth.shape[0]):
        for b in range(smooth.shape[1]):
            v = smooth[a, b]
            if v <= cut:
                continue
            patch = padded[a : a + 3, b : b + 3].copy()
            patch[1, 1] = -np.inf
            if v > patch.max():
                count += 1
    return count


def write_metrics_csv(path, rows):
    """Metric rows as CSV: (metric, context_key, value)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,context,value\n")
        for metric, context, value in rows:
            fh.write(f"{metric},{context},{float(value)!r}\n")
