"""Simulated IPD meta-analyses: Null model, Sim A and Sim B.

Subgroup structure (tree on X2, X1, X5)::

    X2 <= 30, X1 <= 17  -> node 1: gamma 17.5, theta -5
    X2 <= 30, X1 >  17  -> node 2: gamma 30,   theta  0
    X2 >  30, X5 <= 63  -> node 3: gamma 30,   theta  0
    X2 >  30, X5 >  63  -> node 4: gamma 42.5, theta  5

Sim A uses these intercepts in every trial; Sim B draws trial-specific
intercepts ``gamma_jk ~ N(gamma_j, tau_gamma^2)``.
"""

from __future__ import annotations

import itertools
import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .core import IpdDataset, Tree, build_tree

N_COVARIATES = 15
FIXED_MEANS = {0: 10.0, 1: 30.0, 3: -40.0, 4: 70.0}
COV_SD = 10.0
COV_RHO = 0.3
NOISE_SD = 5.0
TARGET_CORR = 0.42

NODE_GAMMA = np.array([17.5, 30.0, 30.0, 42.5])
NODE_THETA = np.array([-5.0, 0.0, 0.0, 5.0])
# (covariate index, cutpoint): root, left child, right child
TRUE_SPLITS = ((1, 30.0), (0, 17.0), (4, 63.0))
SPLITTERS = (0, 1, 4)

SCENARIOS = ("null", "simA", "simB")
CORR_TARGETS = ("none", "b0_with_splitter", "b0_with_nonsplitter",
                "b1_with_splitter", "b1_with_nonsplitter")
GRID_DOMAINS = {
    "K": (5, 10),
    "n_total": (200, 500, 1000),
    "tau0": (0.0, 5.0, 10.0),
    "tau1": (0.0, 2.5, 5.0, 10.0),
    "tau_gamma": (2.5, 5.0, 10.0),
}
EXTRA_N = (2000,)


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "null"
    K: int = 5
    n_total: int = 500
    tau0: float = 0.0
    tau1: float = 0.0
    corr_target: str = "none"
    tau_gamma: float = 5.0
    seed: int = 1
    splitter: int = 1
    nonsplitter: int = 9
    rho: float = COV_RHO

    def validate(self, allow_custom: bool = False) -> "ScenarioConfig":
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.corr_target not in CORR_TARGETS:
            raise ValueError(f"corr_target must be one of {CORR_TARGETS}")
        if self.scenario == "null" and self.corr_target.endswith("_with_splitter"):
            raise ValueError("the Null scenario has no splitting covariates to correlate with")
        if self.K < 1 or self.n_total < self.K:
            raise ValueError("need K >= 1 and at least one subject per trial")
        if self.splitter not in SPLITTERS or self.nonsplitter in SPLITTERS:
            raise ValueError("splitter must be one of X1, X2, X5 and nonsplitter must not")
        if not allow_custom:
            for key, allowed in GRID_DOMAINS.items():
                value = getattr(self, key)
                if key == "n_total" and value in EXTRA_N:
                    continue
                if value not in allowed:
                    raise ValueError(f"{key}={value} outside the scenario grid {allowed} "
                                     "(use allow_custom to override)")
        return self

    @property
    def cell_id(self) -> str:
        """Identifier of the grid cell, independent of the seed."""
        d = asdict(self)
        d.pop("seed")
        return ";".join(f"{k}={d[k]}" for k in sorted(d))

    def replication_seed(self, rep: int) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.seed, zlib.crc32(self.cell_id.encode()), rep])


@dataclass(frozen=True, eq=False)
class TruthLabels:
    true_node: np.ndarray
    true_theta: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    gamma_jk: Optional[np.ndarray] = None
    covariate_means: Optional[np.ndarray] = field(default=None, repr=False)


def reference_tree() -> Tree:
    """The generating subgroup tree with its intercepts and effects."""
    leaves = [{"gamma": g, "theta": t} for g, t in zip(NODE_GAMMA, NODE_THETA)]
    (v0, c0), (v1, c1), (v2, c2) = TRUE_SPLITS
    spec = (v0, c0, (v1, c1, leaves[0], leaves[1]), (v2, c2, leaves[2], leaves[3]))
    return build_tree(spec, [f"X{j + 1}" for j in range(N_COVARIATES)])


def covariate_means(rng) -> np.ndarray:
    means = rng.integers(-70, 71, size=N_COVARIATES).astype(float)
    for j, m in FIXED_MEANS.items():
        means[j] = m
    return means


def gen_covariates(n: int, rng, rho: float = COV_RHO, means=None):
    """Equicorrelated normal covariates with variance 100.

    Returns ``(X, means)``; unless given, the means not fixed by the design
    are drawn once from the integers in [-70, 70].
    """
    rng = np.random.default_rng(rng)
    if means is None:
        means = covariate_means(rng)
    corr = np.full((N_COVARIATES, N_COVARIATES), rho)
    np.fill_diagonal(corr, 1.0)
    chol = np.linalg.cholesky(COV_SD ** 2 * corr)
    X = rng.standard_normal((n, N_COVARIATES)) @ chol.T + means
    return X, np.asarray(means, dtype=float)


def true_node(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    (v0, c0), (v1, c1), (v2, c2) = TRUE_SPLITS
    left = X[:, v0] <= c0
    return np.where(left, np.where(X[:, v1] <= c1, 1, 2), np.where(X[:, v2] <= c2, 3, 4))


def true_f(x_row, t: int, scenario: str, gamma_jk=None, trial: Optional[int] = None):
    """Mean contribution ``f(x, t)`` and true subgroup of one subject."""
    if scenario == "null":
        return 0.0, 1
    j = int(true_node(x_row)[0])
    if scenario == "simB":
        if gamma_jk is None or trial is None:
            raise ValueError("Sim B needs the drawn intercepts and the trial id")
        gamma = gamma_jk[j - 1, trial - 1]
    else:
        gamma = NODE_GAMMA[j - 1]
    return float(gamma + NODE_THETA[j - 1] * t), j


def _correlate(x, b, r):
    """Shift ``x`` by a multiple of ``b`` so that corr(x, b) is about ``r``."""
    sd_b = b.std()
    if sd_b == 0:
        return x
    c = r * x.std() / (sd_b * np.sqrt(1 - r * r))
    shifted = x + c * b
    return shifted - (shifted.mean() - x.mean())


def gen_dataset(config: ScenarioConfig, rng=None, population: Optional[TruthLabels] = None):
    """Draw one dataset and its truth labels.

    ``rng`` defaults to a generator seeded from ``config.seed``.  Passing the
    truth labels of an earlier draw as ``population`` gives new subjects from
    the same trials: covariate means, random effects and (Sim B) intercepts
    are reused, everything subject-level is redrawn.
    """
    rng = np.random.default_rng(config.seed if rng is None else rng)
    K = config.K
    per_trial = config.n_total // K
    n = per_trial * K
    trial = np.repeat(np.arange(1, K + 1), per_trial)
    X, means = gen_covariates(n, rng, config.rho,
                              None if population is None else population.covariate_means)
    trt = rng.binomial(1, 0.5, n)
    if population is None:
        b0 = rng.normal(0.0, config.tau0, K)
        b1 = rng.normal(0.0, config.tau1, K)
        gamma_jk = None
        if config.scenario == "simB":
            gamma_jk = NODE_GAMMA[:, None] + rng.normal(0.0, config.tau_gamma, (4, K))
    else:
        b0, b1, gamma_jk = population.b0, population.b1, population.gamma_jk

    target = config.corr_target
    if target != "none":
        b = b0 if target.startswith("b0") else b1
        tau = config.tau0 if target.startswith("b0") else config.tau1
        col = config.splitter if target.endswith("_with_splitter") else config.nonsplitter
        if tau > 0:
            X[:, col] = _correlate(X[:, col], b[trial - 1], TARGET_CORR)

    if config.scenario == "null":
        node = np.ones(n, dtype=int)
        theta = np.zeros(n)
        f = np.zeros(n)
    else:
        node = true_node(X)
        theta = NODE_THETA[node - 1]
        gamma = gamma_jk[node - 1, trial - 1] if gamma_jk is not None else NODE_GAMMA[node - 1]
        f = gamma + theta * trt
    y = f + b0[trial - 1] + b1[trial - 1] * trt + rng.normal(0.0, NOISE_SD, n)
    names = tuple(f"X{j + 1}" for j in range(N_COVARIATES))
    data = IpdDataset(y, trt, trial, X, names)
    return data, TruthLabels(node, theta, b0, b1, gamma_jk, means)


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


GRID_KEYS = [f.name for f in fields(ScenarioConfig)]


def expand_grid(doc: dict, allow_custom: bool = False) -> list:
    """Cartesian product of a flat key-value grid description.

    Keys are :class:`ScenarioConfig` field names (``N`` is accepted for
    ``n_total``); values may be scalars or lists.  Keys outside the config
    (``methods``, ``reps``, ...) are ignored here.  Null cells that would
    correlate with a splitter are skipped.
    """
    doc = dict(doc)
    if "N" in doc:
        doc["n_total"] = doc.pop("N")
    keys = [k for k in GRID_KEYS if k in doc]
    out = []
    for combo in itertools.product(*(_as_list(doc[k]) for k in keys)):
        cfg = ScenarioConfig(**dict(zip(keys, combo)))
        if cfg.scenario == "null" and cfg.corr_target.endswith("_with_splitter"):
            continue
        if cfg.scenario != "simB" and "tau_gamma" in doc and cfg.tau_gamma != _as_list(doc["tau_gamma"])[0]:
            continue
        out.append(cfg.validate(allow_custom))
    return out


def load_grid(path: Union[str, Path]) -> dict:
    with open(path) as fh:
        return json.load(fh)


def with_seed(config: ScenarioConfig, seed: int) -> ScenarioConfig:
    return replace(config, seed=seed)
