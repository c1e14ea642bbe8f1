"""Gaussian node models fitted by least squares on an offset-adjusted response.

Two node models are supported: the common-intercept model
``y_adj ~ gamma + theta * trt`` and the stratified model
``y_adj ~ gamma_k + theta * trt`` with one intercept per trial.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np


class DegenerateNode(ValueError):
    """The treatment effect is not estimable in the node."""


@dataclass(frozen=True, eq=False)
class NodeFit:
    gamma_hat: Union[float, np.ndarray]
    theta_hat: float
    sigma_hat_sq: float
    rss: float
    n: int
    scores: np.ndarray


def fit_node(y_adj, trt, strata=None, n_strata: Optional[int] = None) -> NodeFit:
    """OLS of the offset-adjusted response on ``(1, trt)`` or ``(trial dummies, trt)``.

    ``scores`` holds the per-observation estimating-function contributions
    (residual times regressor) without the ``1/sigma^2`` factor.  Under the
    stratified model ``gamma_hat`` has one entry per stratum id ``1..n_strata``
    (NaN for strata absent from the node) and score columns that vanish
    identically (singleton strata) are dropped.
    """
    y = np.asarray(y_adj, dtype=float)
    t = np.asarray(trt)
    n = len(y)
    if n < 2 or len(t) != n:
        raise ValueError("need at least two observations with matching trt")
    treated = t == 1
    n1 = int(treated.sum())
    if n1 == 0 or n1 == n:
        raise DegenerateNode(f"node with n={n} has only one treatment arm")
    if strata is None:
        mu0 = y[~treated].mean()
        mu1 = y[treated].mean()
        resid = y - np.where(treated, mu1, mu0)
        rss = float(resid @ resid)
        scores = np.column_stack([resid, resid * treated])
        return NodeFit(float(mu0), float(mu1 - mu0), rss / n, rss, n, scores)

    strata = np.asarray(strata, dtype=int)
    K = int(strata.max()) if n_strata is None else n_strata
    cnt = np.bincount(strata, minlength=K + 1).astype(float)
    present = cnt > 0
    safe = np.where(present, cnt, 1.0)
    ybar = np.bincount(strata, weights=y, minlength=K + 1) / safe
    tbar = np.bincount(strata, weights=treated.astype(float), minlength=K + 1) / safe
    tc = treated - tbar[strata]
    stt = float(tc @ tc)
    if stt <= 1e-12:
        raise DegenerateNode("no stratum contains both treatment arms")
    theta = float(tc @ (y - ybar[strata])) / stt
    gamma = np.where(present, ybar - theta * tbar, np.nan)[1:]
    resid = y - gamma[strata - 1] - theta * treated
    rss = float(resid @ resid)
    ids = np.nonzero(present[1:])[0] + 1
    icpt = (strata[:, None] == ids[None, :]) * resid[:, None]
    keep = np.sum(icpt * icpt, axis=0) > 1e-20 * max(rss, 1e-300)
    scores = np.column_stack([icpt[:, keep], resid * treated])
    return NodeFit(gamma, theta, rss / n, rss, n, scores)


def objective(fit: NodeFit) -> float:
    """Residual sum of squares; summed over children when comparing splits."""
    return fit.rss
