"""Score-based parameter instability tests (supLM) and split variable selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Optional, Sequence

import numpy as np
from scipy import special, stats

# Siegmund's constant for the overshoot of a discretely sampled Brownian path.
SIEGMUND = 0.5826


class UninformativeScores(Exception):
    """Raised when the empirical score covariance is singular."""


@dataclass(frozen=True)
class InstabilityResult:
    statistics: np.ndarray
    p_values: np.ndarray
    selected: Optional[int]
    adjusted_alpha: float


def bessel_sup_tail(x, k: int, length: float):
    """Asymptotic upper tail of the sup of a squared k-dim Bessel-type process.

    ``length`` is the log-odds length of the trimming window,
    ``2 log((1 - pi) / pi)`` for symmetric trimming at ``pi``.
    """
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_dens = (k / 2) * np.log(x) - x / 2 - (k / 2) * math.log(2) - special.gammaln(k / 2)
        out = np.exp(log_dens) * (length * (1 - k / x) + 2 / x)
    return np.where(x > k, out, 1.0)


@lru_cache(maxsize=1)
def _table():
    with resources.files("metamob.data").joinpath("suplm_table.npz").open("rb") as fh:
        data = np.load(fh)
        return (data["log_sf"].astype(float), data["L"].astype(float), data["x"].astype(float))


def window_length(trim: float) -> float:
    return 2.0 * math.log((1.0 - trim) / trim)


def discreteness_shift(length: float, n: Optional[int]) -> float:
    """Average Siegmund overshoot for a grid of step 1/n, on the radial scale."""
    if not n:
        return 0.0
    if length < 1e-8:
        mean_scale = 2.0
    else:
        mean_scale = 8.0 * math.sinh(length / 4.0) / length
    return SIEGMUND * mean_scale / math.sqrt(n)


def suplm_pvalue(statistic: float, k: int, trim: float, n: Optional[int] = None) -> float:
    """Approximate p-value of a supLM statistic.

    Uses a tabulation of the limiting distribution (dimension ``k``, symmetric
    trimming ``trim``).  When ``n`` is given the statistic is treated as a
    supremum over the ``n``-point grid and the continuous-time law is shifted
    accordingly, which removes most of the conservativeness at small ``n``.
    """
    if statistic <= 0:
        return 1.0
    log_sf, L_grid, x_grid = _table()
    if k < 1:
        raise ValueError("k must be positive")
    length = window_length(trim)
    if length > L_grid[-1] + 1e-9:
        raise ValueError(f"trim={trim} below the tabulated range")
    length = max(length, 0.0)
    x = (math.sqrt(statistic) + discreteness_shift(length, n)) ** 2
    if x > x_grid[-1] or k > log_sf.shape[0]:
        # beyond the tabulation only the asymptotic tail is available
        return float(min(1.0, bessel_sup_tail(x, k, length)))
    j = min(np.searchsorted(L_grid, length, side="right") - 1, len(L_grid) - 2)
    w = (length - L_grid[j]) / (L_grid[j + 1] - L_grid[j])
    row = (1 - w) * log_sf[k - 1, j] + w * log_sf[k - 1, j + 1]
    return float(min(1.0, math.exp(np.interp(x, x_grid, row))))


def simulate_suplm_null(k: int, trim: float, n_grid: int = 1000, reps: int = 10_000, rng=None):
    """Draw supLM statistics of a k-dim Brownian bridge sampled on ``n_grid`` points."""
    rng = np.random.default_rng(rng)
    lo = max(1, int(math.floor(trim * n_grid + 1e-9)))
    hi = n_grid - lo
    idx = np.arange(lo, hi + 1)
    t = idx / n_grid
    out = np.empty(reps)
    chunk = max(1, 2_000_000 // (n_grid * k))
    for start in range(0, reps, chunk):
        m = min(chunk, reps - start)
        walk = np.cumsum(rng.standard_normal((m, n_grid, k)), axis=1)
        bridge = walk[:, idx - 1, :] - t[None, :, None] * walk[:, -1:, :]
        lm = np.sum(bridge ** 2, axis=2) / n_grid / (t * (1 - t))
        out[start:start + m] = lm.max(axis=1)
    return out


def suplm_pvalue_mc(statistic: float, k: int, trim: float, n_grid: int = 1000,
                    reps: int = 10_000, rng=None) -> float:
    """Monte-Carlo p-value from the simulated limiting process."""
    sims = simulate_suplm_null(k, trim, n_grid, reps, rng)
    return float((1 + np.sum(sims >= statistic)) / (reps + 1))


def suplm_statistic(scores, z, trim: float = 0.1):
    """supLM statistic of the cumulative score process ordered by ``z``.

    Returns ``(statistic, n_from)``; raises :class:`UninformativeScores` if the
    outer-product score covariance is singular.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[:, None]
    z = np.asarray(z, dtype=float)
    n, k = scores.shape
    if len(z) != n:
        raise ValueError("scores and z differ in length")
    lo = max(1, int(math.floor(trim * n + 1e-9)))
    hi = n - lo
    if hi < lo:
        raise ValueError(f"n={n} too small for trim={trim}")
    J = scores.T @ scores / n
    evals, evecs = np.linalg.eigh(J)
    if evals[-1] <= 1e-300 or evals[0] <= 1e-10 * evals[-1]:
        raise UninformativeScores("singular score covariance")
    order = np.argsort(z, kind="mergesort")
    zs = z[order]
    csum = np.cumsum(scores[order], axis=0)
    idx = np.arange(lo, hi + 1)
    # only cut between distinct z values
    idx = idx[zs[idx - 1] < zs[np.minimum(idx, n - 1)]]
    if len(idx) == 0:
        return 0.0, lo
    t = idx / n
    proj = csum[idx - 1] @ (evecs / np.sqrt(evals))
    lm = np.sum(proj ** 2, axis=1) / n / (t * (1 - t))
    return float(lm.max()), lo


def suplm_test(scores, z, trim: float = 0.1):
    """Return ``(statistic, p_value)``; p-value 1 when the scores carry no information."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[:, None]
    n, k = scores.shape
    try:
        stat, lo = suplm_statistic(scores, z, trim)
    except UninformativeScores:
        return 0.0, 1.0
    return stat, suplm_pvalue(stat, k, lo / n, n)


def select_split_variable(p_values: Sequence[float], alpha: float, p: Optional[int] = None) -> Optional[int]:
    """Bonferroni selection: argmin p-value if it is at most ``alpha / p``."""
    p_values = np.asarray(p_values, dtype=float)
    if len(p_values) == 0:
        return None
    p = len(p_values) if p is None else p
    best = int(np.argmin(p_values))
    return best if p_values[best] <= alpha / p else None


def instability_tests(scores, X, trim: float = 0.1, alpha: float = 0.05) -> InstabilityResult:
    """Run :func:`suplm_test` against every column of ``X`` and pick a split variable."""
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    res = [suplm_test(scores, X[:, j], trim) for j in range(p)]
    statistics = np.array([r[0] for r in res])
    p_values = np.array([r[1] for r in res])
    return InstabilityResult(statistics, p_values, select_split_variable(p_values, alpha, p), alpha / p)
