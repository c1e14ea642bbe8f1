"""Alternating tree / mixed-model estimation (MOB-RI, metaMOB-RI, metaMOB-SI).

Plain MOB (``ModelSpec.M0``) is the degenerate case with a single tree fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import IpdDataset, LmmFit, ModelSpec, RandomEffects, Tree
from .lmm import LmmProblem, fit_lmm
from .mobtree import TreeControls, grow_tree


class SubgroupAbsent(ValueError):
    """A terminal node of the fitted tree receives no subjects of the new data."""


@dataclass(frozen=True, eq=False)
class GlmmTreeFit:
    tree: Tree
    lmm: LmmFit
    spec: ModelSpec
    n_iter: int
    converged: bool
    loglik_trace: np.ndarray
    warnings: tuple = field(default=())

    @property
    def n_terminals(self) -> int:
        return self.tree.n_terminals

    def warning_types(self) -> set:
        return {w.split(":", 1)[-1].strip() for w in self.warnings}


def _refit_params(tree: Tree, lfit: LmmFit, assignment) -> Tree:
    n_obs = np.bincount(assignment, minlength=tree.n_terminals + 1)[1:]
    return tree.with_params(lfit.gamma, lfit.theta, n_obs)


def fit(dataset: IpdDataset, spec: ModelSpec = ModelSpec.M3, controls: TreeControls = TreeControls(),
        abstol: float = 0.001, max_iter: int = 100) -> GlmmTreeFit:
    """Grow a subgroup tree under the node model ``spec``.

    For the mixed variants the tree is regrown on ``y`` minus the current
    random-effect prediction (with per-trial intercepts in the node model for
    M3), the mixed model is refitted on the new partition, and the loop stops
    once the ML log-likelihood moves by at most ``abstol`` or the tree repeats.
    Warnings are those of the returned mixed-model fit, plus ``max_iter`` when
    the loop did not settle.
    """
    spec = ModelSpec(spec)
    if spec is ModelSpec.M0:
        tree = grow_tree(dataset, None, controls)
        assign = tree.predict(dataset.X)
        lfit = fit_lmm(LmmProblem.from_assignment(dataset, assign, spec, tree.n_terminals))
        return GlmmTreeFit(tree, lfit, spec, 1, True, np.array([lfit.loglik]))

    re = RandomEffects.zeros(dataset.K)
    trace = []
    best = None
    prev_struct = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        offset = re.offset(dataset.trial, dataset.trt)
        tree = grow_tree(dataset, offset, controls, stratified=spec.stratified)
        assign = tree.predict(dataset.X)
        lfit = fit_lmm(LmmProblem.from_assignment(dataset, assign, spec, tree.n_terminals))
        trace.append(lfit.loglik)
        if best is None or lfit.loglik > best[2].loglik:
            best = (it, tree, lfit, assign)
        struct = tree.structure()
        same_tree = struct == prev_struct
        if same_tree or (len(trace) > 1 and abs(trace[-1] - trace[-2]) <= abstol):
            converged = True
            best = (it, tree, lfit, assign)
            break
        prev_struct = struct
        re = lfit.re
    at, tree, lfit, assign = best
    warnings = [f"iter {at}: {w}" for w in lfit.warnings]
    if not converged:
        warnings.append(f"iter {it}: max_iter")
    return GlmmTreeFit(_refit_params(tree, lfit, assign), lfit, spec, it, converged,
                       np.array(trace), tuple(warnings))


def estimate_subject_effects(fit: GlmmTreeFit, newdata: IpdDataset, return_fit: bool = False):
    """Per-subject subgroup treatment effect on new data.

    Subjects are routed through the fitted tree, the same node model is
    refitted on ``newdata`` with that partition, and each subject receives the
    fixed treatment effect of its node.
    """
    assign = fit.tree.predict(newdata.X)
    J = fit.tree.n_terminals
    counts = np.bincount(assign, minlength=J + 1)[1:]
    if np.any(counts == 0):
        missing = [j + 1 for j in np.nonzero(counts == 0)[0]]
        raise SubgroupAbsent(f"terminal node(s) {missing} receive no subjects")
    lfit = fit_lmm(LmmProblem.from_assignment(newdata, assign, fit.spec, J))
    if np.any(~np.isfinite(lfit.theta)):
        raise SubgroupAbsent("treatment effect not estimable in some node")
    effects = lfit.theta[assign - 1]
    return (effects, lfit) if return_fit else effects

