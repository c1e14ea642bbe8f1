"""Scoring fitted trees against the simulation truth and aggregating replications."""

from __future__ import annotations

import logging
import math
import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import IpdDataset, InternalNode, ModelSpec, TerminalNode, Tree
from .glmmtree import GlmmTreeFit, SubgroupAbsent, estimate_subject_effects, fit
from .lmm import UnidentifiableFixedEffects
from .mobtree import TreeControls
from .simgen import TRUE_SPLITS, ScenarioConfig, TruthLabels, gen_dataset

log = logging.getLogger(__name__)

CUTPOINT_TOL = 5.0
WORKERS_ENV = "METAMOB_WORKERS"


@dataclass
class ReplicationScore:
    rep: int
    method: str
    discovered: bool = False
    n_subgroups: int = 0
    accurate: Optional[bool] = None
    effect_corr: Optional[float] = None
    corr_excluded: Optional[str] = None
    excluded: bool = False
    reason: Optional[str] = None
    warnings: tuple = ()
    n_iter: int = 0
    converged: bool = True
    seconds: float = 0.0


def tree_accuracy(tree: Tree, scenario: str = "simA", tol: float = CUTPOINT_TOL) -> bool:
    """Exact positional match to the generating tree, cutpoints within ``tol``."""
    if scenario not in ("simA", "simB"):
        raise ValueError("accuracy is only defined for Sim A / Sim B")
    if tree.n_terminals != 4:
        return False
    root = tree.nodes[0]
    if not isinstance(root, InternalNode):
        return False
    (v0, c0), (v1, c1), (v2, c2) = TRUE_SPLITS

    def matches(node, var, cut):
        return (isinstance(node, InternalNode) and node.split_var == var
                and abs(node.cutpoint - cut) <= tol
                and isinstance(tree.nodes[node.left], TerminalNode)
                and isinstance(tree.nodes[node.right], TerminalNode))

    return (root.split_var == v0 and abs(root.cutpoint - c0) <= tol
            and matches(tree.nodes[root.left], v1, c1)
            and matches(tree.nodes[root.right], v2, c2))


def reference_effects(assignment, true_theta) -> np.ndarray:
    """Per-subject weighted mean of the true effect over its estimated subgroup.

    The weights are the counts of each true subgroup among the subjects placed
    in the estimated subgroup, so this equals the subgroup mean of the true
    per-subject effects.
    """
    assignment = np.asarray(assignment)
    true_theta = np.asarray(true_theta, dtype=float)
    J = int(assignment.max())
    sums = np.bincount(assignment, weights=true_theta, minlength=J + 1)
    counts = np.bincount(assignment, minlength=J + 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts
    return means[assignment]


def effect_correlation(gfit: GlmmTreeFit, test: IpdDataset, truth: TruthLabels):
    """Pearson correlation of estimated and reference effects on test data.

    Returns ``(correlation, exclusion_reason)``; exactly one is ``None``.
    """
    if gfit.n_terminals < 2:
        return None, "single_subgroup"
    try:
        est, lfit = estimate_subject_effects(gfit, test, return_fit=True)
    except SubgroupAbsent:
        return None, "absent_subgroup"
    except UnidentifiableFixedEffects:
        return None, "unidentifiable_test_fit"
    if lfit.warnings:
        return None, "test_convergence"
    ref = reference_effects(gfit.tree.predict(test.X), truth.true_theta)
    if np.std(ref) == 0 or np.std(est) == 0:
        return None, "zero_variance"
    return float(np.corrcoef(est, ref)[0, 1]), None


def score_replication(config: ScenarioConfig, specs: Sequence[ModelSpec], rep: int,
                      controls: TreeControls = TreeControls(), abstol: float = 0.001,
                      max_iter: int = 100, with_corr: bool = True) -> list:
    """Fit every method on one simulated train/test pair."""
    seq_train, seq_test = config.replication_seed(rep).spawn(2)
    train, truth_train = gen_dataset(config, np.random.default_rng(seq_train))
    test = truth_test = None
    if with_corr and config.scenario != "null":
        test, truth_test = gen_dataset(config, np.random.default_rng(seq_test), truth_train)
    out = []
    for spec in specs:
        s = ReplicationScore(rep=rep, method=spec.method)
        t0 = time.perf_counter()
        try:
            g = fit(train, spec, controls, abstol, max_iter)
        except Exception as exc:  # recorded, never fatal for the grid
            s.excluded, s.reason = True, f"fit_error:{type(exc).__name__}"
            s.seconds = time.perf_counter() - t0
            out.append(s)
            continue
        s.seconds = time.perf_counter() - t0
        s.n_iter, s.converged = g.n_iter, g.converged
        s.warnings = tuple(sorted(g.warning_types()))
        s.n_subgroups = g.n_terminals
        s.discovered = g.n_terminals > 1
        if config.scenario != "null":
            s.accurate = tree_accuracy(g.tree, config.scenario)
        if s.warnings:
            s.excluded, s.reason = True, "convergence_warning"
        elif test is not None:
            s.effect_corr, s.corr_excluded = effect_correlation(g, test, truth_test)
        out.append(s)
    return out


def _worker(args):
    return score_replication(*args)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_cell(config: ScenarioConfig, specs: Sequence[ModelSpec], reps: int, workers: Optional[int] = None,
             controls: TreeControls = TreeControls(), abstol: float = 0.001, max_iter: int = 100,
             with_corr: bool = True) -> dict:
    """Score ``reps`` replications of one cell for several methods on shared data.

    Returns ``{method: [ReplicationScore, ...]}`` ordered by replication.
    """
    specs = [ModelSpec(s) for s in specs]
    workers = default_workers() if workers is None else workers
    jobs = [(config, specs, rep, controls, abstol, max_iter, with_corr) for rep in range(reps)]
    if workers > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker, jobs, chunksize=max(1, reps // (4 * workers))))
    else:
        results = [_worker(j) for j in jobs]
    by_method = {s.method: [] for s in specs}
    for rep_scores in results:
        for s in rep_scores:
            by_method[s.method].append(s)
    return by_method


def _mean(values):
    return float(np.mean(values)) if len(values) else math.nan


def aggregate(scores: Sequence[ReplicationScore], config: Optional[ScenarioConfig] = None) -> dict:
    """Reduce replication scores to one record (order independent)."""
    scores = sorted(scores, key=lambda s: s.rep)
    reps = len(scores)
    inc = [s for s in scores if not s.excluded]
    n = len(inc)
    rate = _mean([s.discovered for s in inc])
    rec = {}
    if config is not None:
        rec.update({k: v for k, v in asdict(config).items()})
        rec["cell_id"] = config.cell_id
    rec["method"] = scores[0].method if scores else ""
    rec["reps"] = reps
    rec["n_included"] = n
    reasons = Counter(s.reason for s in scores if s.excluded)
    rec["n_excluded"] = sum(reasons.values())
    rec["excluded_reasons"] = dict(sorted(reasons.items()))
    rec["discovery_rate"] = rate
    rec["discovery_se"] = math.sqrt(rate * (1 - rate) / n) if n else math.nan
    rec["mean_subgroups"] = _mean([s.n_subgroups for s in inc])
    acc = [s.accurate for s in inc if s.accurate is not None]
    rec["accuracy"] = _mean(acc)
    rec["accuracy_se"] = math.sqrt(rec["accuracy"] * (1 - rec["accuracy"]) / len(acc)) if acc else math.nan
    corr = [s.effect_corr for s in inc if s.effect_corr is not None]
    rec["mean_effect_corr"] = _mean(corr)
    rec["n_effect_corr"] = len(corr)
    rec["corr_excluded_reasons"] = dict(sorted(Counter(s.corr_excluded for s in inc if s.corr_excluded).items()))
    warned = [s for s in scores if s.warnings]
    rec["warning_rate"] = len(warned) / reps if reps else math.nan
    rec["warning_types"] = dict(sorted(Counter(w for s in scores for w in s.warnings).items()))
    fitted = [s for s in scores if s.n_iter > 0]
    rec["mean_iter"] = _mean([s.n_iter for s in fitted])
    rec["converged_rate"] = _mean([s.converged for s in fitted])
    rec["iter_le3_rate"] = _mean([s.n_iter <= 3 for s in fitted])
    rec["mean_seconds"] = _mean([s.seconds for s in scores])
    rec["max_seconds"] = float(max((s.seconds for s in scores), default=math.nan))
    return rec


def run_scenario(config: ScenarioConfig, spec: ModelSpec, reps: int, workers: Optional[int] = None,
                 **kw) -> dict:
    """Aggregate record for one method on one cell."""
    if reps < 1:
        raise ValueError("reps must be at least 1")
    scores = run_cell(config, [spec], reps, workers, **kw)[ModelSpec(spec).method]
    return aggregate(scores, config)
