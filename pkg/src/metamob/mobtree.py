"""Model-based recursive partitioning of the ``gamma + theta * trt`` node model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import IpdDataset, Tree, build_tree
from .fluctest import instability_tests
from .linmod import fit_node, objective


class NoAdmissibleSplit(ValueError):
    pass


@dataclass(frozen=True)
class TreeControls:
    alpha: float = 0.05
    minsize: int = 20
    max_depth: Optional[int] = None
    trim: float = 0.1

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.minsize < 2:
            raise ValueError("minsize must be at least 2")
        if not 0 < self.trim < 0.5:
            raise ValueError("trim must lie in (0, 0.5)")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")


def _segment_rss(n0, n1, s0, s1, ss):
    with np.errstate(divide="ignore", invalid="ignore"):
        return ss - np.where(n0 > 0, s0 * s0 / n0, 0.0) - np.where(n1 > 0, s1 * s1 / n1, 0.0)


def _stratified_rss(n, sy, syy, st, sty):
    """RSS of ``y ~ stratum intercepts + trt`` from per-stratum sums (last axis).

    Returns ``(rss, stt)``; ``stt`` is the pooled within-stratum treatment
    variation, zero when the effect is not estimable.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(n > 0, 1.0 / n, 0.0)
    syy_w = np.sum(syy - sy * sy * inv, axis=-1)
    stt = np.sum(st - st * st * inv, axis=-1)
    sty_w = np.sum(sty - st * sy * inv, axis=-1)
    ok = stt > 1e-12
    rss = syy_w - np.where(ok, sty_w * sty_w / np.where(ok, stt, 1.0), 0.0)
    return rss, np.where(ok, stt, 0.0)


def best_split_point(y_adj, trt, x, minsize: int, strata=None):
    """Exhaustive least-squares search for the cutpoint of one covariate.

    Candidates are the boundaries between distinct sorted ``x`` values that
    leave at least ``minsize`` observations and both treatment arms on each
    side (with ``strata``, the effect must also be estimable within trials).
    Returns ``(cutpoint, left_rss + right_rss)``; the cutpoint is the largest
    ``x`` value sent left.  Ties go to the smaller cutpoint.
    """
    y = np.asarray(y_adj, dtype=float)
    t = np.asarray(trt) == 1
    x = np.asarray(x, dtype=float)
    n = len(y)
    order = np.argsort(x, kind="mergesort")
    xs, ts = x[order], t[order]
    ys = y[order] - y.mean()
    i = np.arange(minsize, n - minsize + 1)  # size of the left child
    if len(i) == 0:
        raise NoAdmissibleSplit(f"n={n} < 2 * minsize")
    k = i - 1
    c1 = np.cumsum(ts)
    c0 = np.arange(1, n + 1) - c1
    n0l, n1l = c0[k], c1[k]
    n0r, n1r = c0[-1] - n0l, c1[-1] - n1l
    ok = (xs[k] < xs[np.minimum(i, n - 1)]) & (n0l > 0) & (n1l > 0) & (n0r > 0) & (n1r > 0)
    if strata is None:
        s1 = np.cumsum(np.where(ts, ys, 0.0))
        s0 = np.cumsum(ys) - s1
        ss = np.cumsum(ys * ys)
        left = _segment_rss(n0l, n1l, s0[k], s1[k], ss[k])
        right = _segment_rss(n0r, n1r, s0[-1] - s0[k], s1[-1] - s1[k], ss[-1] - ss[k])
    else:
        g = np.asarray(strata, dtype=int)[order]
        onehot = np.zeros((n, int(g.max())))
        onehot[np.arange(n), g - 1] = 1.0
        tf = ts.astype(float)[:, None]
        sums = [np.cumsum(onehot * v, axis=0) for v in (1.0, ys[:, None], (ys * ys)[:, None], tf, tf * ys[:, None])]
        lsums = [c[k] for c in sums]
        rsums = [c[-1] - c[k] for c in sums]
        left, stt_l = _stratified_rss(*lsums)
        right, stt_r = _stratified_rss(*rsums)
        ok &= (stt_l > 0) & (stt_r > 0)
    if not ok.any():
        raise NoAdmissibleSplit("no boundary satisfies the size and arm constraints")
    total = np.where(ok, left + right, np.inf)
    best = int(np.argmin(total))
    return float(xs[k[best]]), float(max(total[best], 0.0))


def grow_tree(dataset: IpdDataset, offset=None, controls: TreeControls = TreeControls(),
              stratified: bool = False) -> Tree:
    """Grow a MOB tree on ``y - offset``.

    Each node is fitted, tested for parameter instability along every
    covariate and, if a Bonferroni-significant covariate exists, split at the
    least-squares cutpoint of that covariate.  ``stratified`` switches the
    node model to per-trial intercepts plus a common treatment effect.
    """
    y_adj = dataset.y if offset is None else dataset.y - np.asarray(offset, dtype=float)
    if len(y_adj) != dataset.n:
        raise ValueError("offset must have one entry per subject")
    X, trt = dataset.X, dataset.trt
    strata = dataset.trial if stratified else None
    K = dataset.K
    minsize = controls.minsize

    def grow(rows, depth):
        g = None if strata is None else strata[rows]
        fit = fit_node(y_adj[rows], trt[rows], g, K)
        n = len(rows)
        gamma = fit.gamma_hat if strata is None else tuple(fit.gamma_hat)
        leaf = {"gamma": gamma, "theta": fit.theta_hat, "n_obs": n}
        if n < 2 * minsize or (controls.max_depth is not None and depth >= controls.max_depth):
            return leaf
        trim = max(controls.trim, minsize / n)
        tests = instability_tests(fit.scores, X[rows], trim, controls.alpha)
        if tests.selected is None:
            return leaf
        var = tests.selected
        try:
            cut, total = best_split_point(y_adj[rows], trt[rows], X[rows, var], minsize, g)
        except NoAdmissibleSplit:
            return leaf
        if not total < objective(fit):
            return leaf
        go_left = X[rows, var] <= cut
        return (var, cut, grow(rows[go_left], depth + 1), grow(rows[~go_left], depth + 1))

    return build_tree(grow(np.arange(dataset.n), 0), dataset.covariate_names)
