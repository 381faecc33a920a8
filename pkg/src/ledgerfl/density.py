"""One-dimensional Gaussian KDE and valley-based grouping of distance scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

GRID_POINTS = 2000
MIN_BANDWIDTH = 1e-6
# dips shallower than this fraction of the peak are rounding noise, not valleys
VALLEY_RTOL = 1e-9


@dataclass(frozen=True)
class KdeCurve:
    xs: np.ndarray
    ys: np.ndarray
    bandwidth: float


def silverman_bandwidth(scores) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5), falling back to std when IQR is 0."""
    c = np.asarray(scores, dtype=float)
    n = c.size
    if n < 2:
        return MIN_BANDWIDTH
    sigma = float(np.std(c, ddof=1))
    spread = float(stats.iqr(c)) / 1.34
    s = min(sigma, spread) if spread > 0 else sigma
    return max(0.9 * s * n ** -0.2, MIN_BANDWIDTH)


def _check_scores(scores) -> np.ndarray:
    c = np.asarray(scores, dtype=float).ravel()
    if c.size == 0:
        raise ValueError("at least one score is required")
    if not np.all(np.isfinite(c)):
        raise ValueError("scores must be finite")
    return c


def gaussian_kde(scores, f: int = GRID_POINTS, bandwidth_rule=silverman_bandwidth) -> KdeCurve:
    """Evaluate the kernel density of `scores` on `f` points spanning [min, max].

    A degenerate sample (all scores equal) yields a single-point spike: every
    grid point sits on the score, so the curve is flat and has no valleys.
    """
    c = _check_scores(scores)
    lo, hi = float(c.min()), float(c.max())
    xs = np.linspace(lo, hi, f)
    h = float(bandwidth_rule(c))
    if lo == hi:
        peak = 1.0 / (h * np.sqrt(2 * np.pi))
        return KdeCurve(xs, np.full(f, peak), h)
    kde = stats.gaussian_kde(c, bw_method=h / np.std(c, ddof=1))
    return KdeCurve(xs, kde(xs), h)


def local_minima(ys, rtol: float = VALLEY_RTOL) -> np.ndarray:
    """Interior valley indices, ascending.

    A flat-bottomed valley (a run of equal values with higher values on both
    sides) counts once, at the middle of the run. Endpoints never count.
    """
    ys = np.asarray(ys, dtype=float)
    if ys.size < 3:
        return np.zeros(0, dtype=int)
    tol = rtol * float(np.max(np.abs(ys)))
    d = np.diff(ys)
    slope = np.where(np.abs(d) <= tol, 0, np.sign(d))
    k = np.flatnonzero(slope)
    turns = (slope[k[:-1]] < 0) & (slope[k[1:]] > 0)
    return (k[:-1][turns] + 1 + k[1:][turns]) // 2

def assign_groups(scores, minima_xs) -> list[np.ndarray]:
    """Split score indices at the valley positions into len(minima_xs)+1 groups.

    Group m holds scores in (b_{m-1}, b_m]; a score equal to a boundary joins
    the lower group. Empty groups are kept so indices line up with valleys.
    """
    c = np.asarray(scores, dtype=float)
    b = np.asarray(minima_xs, dtype=float)
    label = np.searchsorted(b, c, side="left")
    return [np.flatnonzero(label == m) for m in range(b.size + 1)]


def kde_groups(scores, f: int = GRID_POINTS) -> list[np.ndarray]:
    """Full pipeline: KDE, valleys, grouping. Returns index arrays per group."""
    c = _check_scores(scores)
    if c.min() == c.max():
        return [np.arange(c.size)]
    curve = gaussian_kde(c, f)
    idx = local_minima(curve.ys)
    return assign_groups(c, curve.xs[idx])
