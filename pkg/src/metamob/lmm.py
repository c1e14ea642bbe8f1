"""REML fitting of the random-intercept / random-slope node models.

The marginal covariance is ``sigma^2 (I + Z Lambda Z')`` with ``Lambda``
diagonal in the variance ratios ``tau_m^2 / sigma^2``.  Fixed effects and
``sigma^2`` are profiled out, so the optimizer only sees the (at most two)
relative standard deviations ``theta_m = sqrt(lambda_m)``, bounded below by 0.
All linear algebra is done on ``r x r`` and ``q x q`` cross-products.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg, optimize

from .core import IpdDataset, LmmFit, ModelSpec, RandomEffects, VarianceComponents, design_vectors

# lme4's default max|grad| tolerance (0.002) relaxed five-fold.
GRAD_TOL = 0.01
THETA_MAX = 100.0
LOG2PI = math.log(2 * math.pi)


class UnidentifiableFixedEffects(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LmmProblem:
    response: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    trial: np.ndarray
    spec: ModelSpec
    n_nodes: int

    @classmethod
    def from_assignment(cls, dataset: IpdDataset, assignment, spec: ModelSpec,
                        n_nodes: Optional[int] = None, response=None) -> "LmmProblem":
        assignment = np.asarray(assignment, dtype=int)
        J = int(assignment.max()) if n_nodes is None else n_nodes
        X, Z = design_vectors(dataset, assignment, spec, J)
        y = dataset.y if response is None else np.asarray(response, dtype=float)
        return cls(y, X, Z, dataset.trial, spec, J)

    @property
    def K(self) -> int:
        return int(self.trial.max())

    def component_of_columns(self) -> np.ndarray:
        """Index into the variance-ratio vector for every column of Z."""
        K = self.K
        if self.spec is ModelSpec.M2:
            return np.repeat([0, 1], K)
        return np.zeros(self.Z.shape[1], dtype=int)


class _Profile:
    """Cross-products and the profiled deviance for one problem."""

    def __init__(self, problem: LmmProblem):
        X = problem.X
        keep = np.any(X != 0, axis=0)
        self.keep = keep
        X = X[:, keep]
        y, Z = problem.response, problem.Z
        self.N, self.q = X.shape
        if self.N <= self.q:
            raise UnidentifiableFixedEffects(f"N={self.N} does not exceed q={self.q}")
        self.XtX = X.T @ X
        if np.linalg.matrix_rank(self.XtX) < self.q:
            raise UnidentifiableFixedEffects("fixed-effect design is rank deficient")
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.ZtZ = Z.T @ Z
        self.ZtX = Z.T @ X
        self.Zty = Z.T @ y
        self.comp = problem.component_of_columns()
        self.m = problem.spec.n_components

    def solve(self, theta):
        """Everything at relative std devs ``theta``; returns a dict."""
        theta = np.asarray(theta, dtype=float)
        r = self.ZtZ.shape[0]
        if r:
            a = theta[self.comp]
            M = np.eye(r) + a[:, None] * self.ZtZ * a[None, :]
            LM = linalg.cholesky(M, lower=True)
            W = linalg.solve_triangular(LM, a[:, None] * self.ZtX, lower=True)
            w = linalg.solve_triangular(LM, a * self.Zty, lower=True)
            logdet_h = 2.0 * np.sum(np.log(np.diag(LM)))
            XHX = self.XtX - W.T @ W
            XHy = self.Xty - W.T @ w
            yHy = self.yty - w @ w
        else:
            a = LM = None
            logdet_h = 0.0
            XHX, XHy, yHy = self.XtX, self.Xty, self.yty
        RX = linalg.cholesky(XHX, lower=True)
        beta = linalg.cho_solve((RX, True), XHy)
        Q = max(float(yHy - XHy @ beta), 1e-300)
        df = self.N - self.q
        dev = df * (LOG2PI + math.log(Q / df)) + logdet_h + 2.0 * np.sum(np.log(np.diag(RX))) + df
        return {"dev": float(dev), "beta": beta, "Q": Q, "logdet_h": logdet_h, "a": a, "LM": LM,
                "RX": RX}

    def deviance(self, theta) -> float:
        try:
            return self.solve(theta)["dev"]
        except linalg.LinAlgError:
            return math.inf

    def gradient(self, theta) -> np.ndarray:
        """Analytic derivative of the profiled deviance in ``theta``.

        With ``H = I + Z diag(a^2) Z'`` and ``P`` the REML projection,
        ``d dev / d lambda_m = tr(Z_m' P Z_m) - df |Z_m' P y|^2 / Q``.
        """
        theta = np.asarray(theta, dtype=float)
        sol = self.solve(theta)
        a, LM, RX, Q = sol["a"], sol["LM"], sol["RX"], sol["Q"]
        if LM is None:
            return np.zeros(0)

        def hinv_z(B):  # Z' H^-1 (.) given Z'(.)
            return B - self.ZtZ @ (a[:, None] * linalg.cho_solve((LM, True), a[:, None] * B))

        ZHZ = hinv_z(self.ZtZ)
        ZHX = hinv_z(self.ZtX)
        ZHy = hinv_z(self.Zty[:, None])[:, 0]
        C = linalg.solve_triangular(RX, ZHX.T, lower=True)
        ZPZ = ZHZ - C.T @ C
        ZPy = ZHy - ZHX @ sol["beta"]
        df = self.N - self.q
        per_col = np.diag(ZPZ) - df * ZPy ** 2 / Q
        dlam = np.bincount(self.comp, weights=per_col, minlength=self.m)
        return 2.0 * theta * dlam

    def blups(self, a, LM, beta) -> np.ndarray:
        if LM is None:
            return np.zeros(0)
        rhs = a * (self.Zty - self.ZtX @ beta)
        return a * linalg.cho_solve((LM, True), rhs)


def _grid_start(prof: _Profile):
    if prof.m == 1:
        grid = np.concatenate([[0.0], np.logspace(-2, 1.5, 15)])
        devs = [prof.deviance([g]) for g in grid]
        return np.array([grid[int(np.argmin(devs))]]), grid
    grid = np.concatenate([[0.0], np.logspace(-2, 1.5, 8)])
    best, best_dev = None, math.inf
    for g0 in grid:
        for g1 in grid:
            d = prof.deviance([g0, g1])
            if d < best_dev:
                best, best_dev = np.array([g0, g1]), d
    return best, grid


def _polish_1d(grad, x, lo=0.0, hi=THETA_MAX):
    """Refine an interior 1-D minimum to a root of the analytic derivative."""
    if x <= 0:
        return x
    for width in (1e-3, 1e-2, 1e-1):
        a, b = max(lo, x * (1 - width)), min(hi, x * (1 + width))
        ga, gb = grad(a), grad(b)
        if ga < 0 < gb:
            return optimize.brentq(grad, a, b, xtol=1e-14, rtol=1e-14)
    return x


def _optimize_1d(prof, start, grid):
    f = prof.deviance
    i = int(np.searchsorted(grid, start[0]))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)] if start[0] > 0 else grid[1]
    res = optimize.minimize_scalar(lambda t: f([t]), bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-10, "maxiter": 500})
    x = np.array([_polish_1d(lambda t: prof.gradient([t])[0], float(res.x))])
    cands = [(f(x), x), (f([0.0]), np.array([0.0])), (f(start), start)]
    dev, x = min(cands, key=lambda c: c[0])
    return x, dev, bool(res.success)


def _optimize_2d(prof, start):
    f = prof.deviance
    bounds = [(0.0, THETA_MAX)] * 2
    res = optimize.minimize(f, np.maximum(start, 1e-2), jac=prof.gradient, method="L-BFGS-B",
                            bounds=bounds, options={"ftol": 1e-15, "gtol": 1e-9, "maxfun": 500})
    cands = [(float(res.fun), np.clip(res.x, 0, None))]
    # boundary faces: one component fixed at zero
    for fixed in (0, 1):
        free = 1 - fixed

        def along(t, free=free):
            v = np.zeros(2)
            v[free] = t
            return v

        r1 = optimize.minimize_scalar(lambda t: f(along(t)), bounds=(0.0, THETA_MAX), method="bounded",
                                      options={"xatol": 1e-8})
        t = _polish_1d(lambda t: prof.gradient(along(t))[free], float(r1.x))
        cands.append((f(along(t)), along(t)))
        v = along(max(start[free], 0.0))
        cands.append((f(v), v))
    cands.append((f(np.zeros(2)), np.zeros(2)))
    dev, x = min(cands, key=lambda c: c[0])
    return x, dev, bool(res.success) or res.status == 2


def _diagnose(prof, x):
    """Gradient / Hessian checks on the free components, in the spirit of lme4."""
    free = np.nonzero(x > 1e-3)[0]
    warnings = []
    if len(free) == 0:
        return warnings
    g = prof.gradient(x)[free]
    H = np.empty((len(free), len(free)))
    for a, i in enumerate(free):
        h = 1e-5 * max(1.0, x[i])
        e = np.zeros_like(x)
        e[i] = h
        H[:, a] = (prof.gradient(x + e)[free] - prof.gradient(x - e)[free]) / (2 * h)
    H = 0.5 * (H + H.T)
    evals = np.linalg.eigvalsh(H)
    if not np.all(np.isfinite(evals)) or evals[0] <= 0:
        warnings.append("hessian")
        return warnings
    scaled = np.linalg.solve(H, g)
    if np.max(np.abs(g)) > GRAD_TOL and np.max(np.abs(scaled)) > GRAD_TOL:
        warnings.append("gradient")
    return warnings


def _fixed_blocks(problem: LmmProblem, keep, beta):
    full = np.full(len(keep), np.nan)
    full[keep] = beta
    J, K = problem.n_nodes, problem.K
    if problem.spec.stratified:
        return full[:J * K].reshape(J, K), full[J * K:], full
    return full[:J], full[J:], full


def fit_lmm(problem: LmmProblem) -> LmmFit:
    """REML fit with profiled fixed effects and residual variance.

    Empty fixed-effect columns (a node without subjects from some trial under
    the stratified model) are dropped and reported as NaN.
    """
    prof = _Profile(problem)
    K = problem.K
    warnings = []
    converged = True
    if prof.m == 0:
        x = np.zeros(0)
        dev = prof.deviance(x)
    else:
        start, grid = _grid_start(prof)
        if prof.m == 1:
            x, dev, ok = _optimize_1d(prof, start, grid)
        else:
            x, dev, ok = _optimize_2d(prof, start)
        if not ok:
            warnings.append("maxfev")
            converged = False
        if np.any(x >= THETA_MAX * 0.999):
            warnings.append("boundary")
        warnings.extend(_diagnose(prof, x))
    sol = prof.solve(x)
    df = prof.N - prof.q
    sigma_sq = sol["Q"] / df
    lam = x ** 2
    spec = problem.spec
    tau0_sq = sigma_sq * lam[0] if spec.random_intercept else 0.0
    tau1_sq = sigma_sq * lam[-1] if spec.random_slope else 0.0
    vc = VarianceComponents(float(tau0_sq), float(tau1_sq), float(sigma_sq))
    b = prof.blups(sol["a"], sol["LM"], sol["beta"])
    re = _split_re(b, spec, K)
    ml = -0.5 * (prof.N * (LOG2PI + math.log(sigma_sq)) + sol["logdet_h"] + sol["Q"] / sigma_sq)
    gamma, theta, beta_full = _fixed_blocks(problem, prof.keep, sol["beta"])
    return LmmFit(gamma, theta, vc, re, float(ml), float(-0.5 * dev), converged, tuple(warnings), beta_full)


def _split_re(b, spec: ModelSpec, K: int) -> RandomEffects:
    zero = np.zeros(K)
    if spec is ModelSpec.M1:
        return RandomEffects(b[:K].copy(), zero)
    if spec is ModelSpec.M2:
        return RandomEffects(b[:K].copy(), b[K:].copy())
    if spec is ModelSpec.M3:
        return RandomEffects(zero, b[:K].copy())
    return RandomEffects(zero, zero.copy())


def blups(problem: LmmProblem, vc: VarianceComponents, fixed) -> RandomEffects:
    """Posterior modes of the random effects given variance components and fixed effects.

    ``fixed`` is the full fixed-effect coefficient vector matching ``problem.X``
    (NaN entries for empty columns are ignored).
    """
    spec = problem.spec
    K = problem.K
    if spec.n_components == 0:
        return _split_re(np.zeros(0), spec, K)
    fixed = np.asarray(fixed, dtype=float)
    beta = np.where(np.isnan(fixed), 0.0, fixed)
    resid = problem.response - problem.X @ beta
    lam = []
    if spec.random_intercept:
        lam.append(vc.tau0_sq / vc.sigma_sq)
    if spec.random_slope:
        lam.append(vc.tau1_sq / vc.sigma_sq)
    a = np.sqrt(np.array(lam))[problem.component_of_columns()]
    Z = problem.Z
    M = np.eye(Z.shape[1]) + a[:, None] * (Z.T @ Z) * a[None, :]
    b = a * np.linalg.solve(M, a * (Z.T @ resid))
    return _split_re(b, spec, K)
