import numpy as np
import pytest

from metamob.core import IpdDataset
from metamob.mobtree import NoAdmissibleSplit, TreeControls, best_split_point, grow_tree

from conftest import make_dataset


def brute_force_split(y, t, x, minsize, strata=None):
    """Try every distinct cut with an explicit regression on each side."""
    best = (None, np.inf)
    for c in np.unique(x)[:-1]:
        left = x <= c
        total = 0.0
        for side in (left, ~left):
            ys, ts = y[side], t[side]
            if side.sum() < minsize or ts.min() == ts.max():
                break
            if strata is None:
                D = np.column_stack([np.ones(len(ys)), ts])
            else:
                gs = strata[side]
                D = np.column_stack([(gs == k).astype(float) for k in np.unique(gs)] + [ts])
                if np.linalg.matrix_rank(D) < D.shape[1]:
                    break
            coef, *_ = np.linalg.lstsq(D, ys, rcond=None)
            r = ys - D @ coef
            total += r @ r
        else:
            if total < best[1] - 1e-9 * max(1.0, abs(total)):
                best = (float(c), total)
    return best


@pytest.mark.parametrize("seed", range(60))
def test_split_search_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 41))
    minsize = int(rng.integers(2, 8))
    t = rng.integers(0, 2, n)
    x = rng.integers(0, 12, n).astype(float) if seed % 2 else rng.normal(size=n)
    y = rng.normal(size=n) + 2 * t * (x > np.median(x))
    want = brute_force_split(y, t, x, minsize)
    if want[0] is None:
        with pytest.raises(NoAdmissibleSplit):
            best_split_point(y, t, x, minsize)
        return
    cut, total = best_split_point(y, t, x, minsize)
    assert cut == want[0]
    assert total == pytest.approx(want[1], rel=1e-8, abs=1e-8)


@pytest.mark.parametrize("seed", range(40))
def test_stratified_split_search_matches_brute_force(seed):
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(24, 41))
    g = rng.integers(1, 4, n)
    t = rng.integers(0, 2, n)
    x = rng.normal(size=n)
    y = rng.normal(size=n) + g + 2 * t * (x > 0)
    want = brute_force_split(y, t, x, 6, g)
    if want[0] is None:
        with pytest.raises(NoAdmissibleSplit):
            best_split_point(y, t, x, 6, g)
        return
    cut, total = best_split_point(y, t, x, 6, g)
    assert cut == want[0]
    assert total == pytest.approx(want[1], rel=1e-8, abs=1e-8)


def test_controls_validation():
    with pytest.raises(ValueError):
        TreeControls(alpha=1.5)
    with pytest.raises(ValueError):
        TreeControls(minsize=1)
    with pytest.raises(ValueError):
        TreeControls(trim=0.5)


def test_constant_outcome_gives_single_terminal(rng):
    d = make_dataset(rng, n=200)
    tree = grow_tree(d.with_y(np.full(d.n, 3.0)))
    assert tree.n_terminals == 1
    assert tree.terminals()[0].theta == 0.0


def test_strong_interaction_is_found(rng):
    d = make_dataset(rng, n=400, effect=4.0)
    tree = grow_tree(d)
    var, cut = tree.splits()[0][1:]
    assert var == 0 and abs(cut) < 0.3
    for leaf in tree.terminals():
        assert leaf.n_obs >= 20


@pytest.mark.parametrize("stratified", [False, True])
def test_offset_equivalence_is_bitwise(rng, stratified):
    for _ in range(10):
        d = make_dataset(rng, n=240, K=4, effect=2.0)
        o = rng.normal(size=d.n) * 3
        a = grow_tree(d, o, stratified=stratified)
        b = grow_tree(d.with_y(d.y - o), None, stratified=stratified)
        assert a == b


def test_minsize_and_depth_controls(rng):
    d = make_dataset(rng, n=400, effect=4.0)
    assert grow_tree(d, controls=TreeControls(max_depth=0)).n_terminals == 1
    tree = grow_tree(d, controls=TreeControls(minsize=150))
    assert all(leaf.n_obs >= 150 for leaf in tree.terminals())
    assert grow_tree(d, controls=TreeControls(minsize=201)).n_terminals == 1


def test_stratified_tree_leaves_carry_trial_intercepts(rng):
    d = make_dataset(rng, n=300, K=3, effect=4.0)
    tree = grow_tree(d, stratified=True)
    leaf = tree.terminals()[0]
    assert isinstance(leaf.gamma, tuple) and len(leaf.gamma) == 3


def test_offset_length_checked(rng):
    d = make_dataset(rng)
    with pytest.raises(ValueError):
        grow_tree(d, np.zeros(d.n - 1))
