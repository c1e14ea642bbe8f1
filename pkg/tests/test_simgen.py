import numpy as np
import pytest

from metamob.simgen import (NODE_GAMMA, ScenarioConfig, expand_grid, gen_covariates, gen_dataset,
                            reference_tree, true_f, true_node, with_seed)


def test_covariate_moments():
    rng = np.random.default_rng(0)
    X, means = gen_covariates(200_000, rng)
    assert means[[0, 1, 3, 4]].tolist() == [10, 30, -40, 70]
    assert np.all(np.abs(means) <= 70) and np.all(means == np.round(means))
    assert np.allclose(X.mean(axis=0), means, atol=0.15)
    assert np.allclose(X.var(axis=0), 100, rtol=0.02)
    C = np.corrcoef(X.T)
    assert np.allclose(C[np.triu_indices(15, 1)], 0.3, atol=0.01)


def test_reference_tree_matches_truth():
    X, _ = gen_covariates(5000, np.random.default_rng(1))
    assert np.array_equal(reference_tree().predict(X), true_node(X))
    assert true_f(X[0], 1, "null") == (0.0, 1)
    f, j = true_f(X[0], 1, "simA")
    assert j == true_node(X[:1])[0]


def test_generator_is_pure_and_seeded():
    cfg = ScenarioConfig("simA", 5, 500, 5, 5, "none", seed=7)
    a, _ = gen_dataset(cfg)
    b, _ = gen_dataset(cfg)
    c, _ = gen_dataset(with_seed(cfg, 8))
    assert np.array_equal(a.y, b.y) and np.array_equal(a.X, b.X)
    assert not np.array_equal(a.y, c.y)
    s1 = cfg.replication_seed(3).generate_state(4)
    assert np.array_equal(s1, cfg.replication_seed(3).generate_state(4))
    assert not np.array_equal(s1, cfg.replication_seed(4).generate_state(4))


def test_balanced_trials_and_treatment():
    d, truth = gen_dataset(ScenarioConfig("null", 10, 1000, 0, 0, "none", seed=2))
    assert np.all(d.trial_sizes() == 100)
    assert abs(d.trt.mean() - 0.5) < 0.06
    assert np.all(truth.true_node == 1) and np.all(truth.true_theta == 0)


@pytest.mark.parametrize("target, col", [("b0_with_nonsplitter", 9), ("b1_with_splitter", 1)])
def test_random_effect_correlation(target, col):
    r = []
    for seed in range(60):
        cfg = ScenarioConfig("simA", 10, 1000, 10, 10, target, seed=seed)
        d, truth = gen_dataset(cfg)
        b = (truth.b0 if target.startswith("b0") else truth.b1)[d.trial - 1]
        r.append(np.corrcoef(d.X[:, col], b)[0, 1])
    assert np.mean(r) == pytest.approx(0.42, abs=0.02)


def test_sim_b_intercepts():
    d, truth = gen_dataset(ScenarioConfig("simB", 5, 1000, 0, 0, "none", tau_gamma=5.0, seed=1))
    assert truth.gamma_jk.shape == (4, 5)
    resid = d.y - truth.gamma_jk[truth.true_node - 1, d.trial - 1] - truth.true_theta * d.trt
    assert resid.std() == pytest.approx(5.0, rel=0.1)
    draws = np.concatenate([gen_dataset(ScenarioConfig("simB", 5, 200, 0, 0, "none", seed=s))[1].gamma_jk
                            - NODE_GAMMA[:, None] for s in range(200)], axis=1)
    assert draws.std() == pytest.approx(5.0, rel=0.05)


def test_population_reuse_for_test_data():
    cfg = ScenarioConfig("simB", 5, 500, 5, 5, "b1_with_splitter", seed=3)
    train, truth = gen_dataset(cfg)
    test, truth2 = gen_dataset(cfg, np.random.default_rng(1), truth)
    assert np.array_equal(truth.b0, truth2.b0) and np.array_equal(truth.gamma_jk, truth2.gamma_jk)
    assert np.array_equal(truth.covariate_means, truth2.covariate_means)
    assert not np.array_equal(train.X, test.X)


def test_grid_expansion_and_validation():
    cells = expand_grid({"scenario": ["null", "simA"], "K": [5, 10], "N": 500,
                         "corr_target": ["none", "b0_with_splitter"], "tau0": 5.0})
    # null cells that would correlate with a splitter are skipped
    assert len(cells) == 2 * 1 + 2 * 2
    assert len({c.cell_id for c in cells}) == len(cells)
    with pytest.raises(ValueError, match="outside"):
        expand_grid({"scenario": "null", "K": 7})
    assert expand_grid({"scenario": "null", "K": 7}, allow_custom=True)[0].K == 7
    with pytest.raises(ValueError):
        ScenarioConfig("simC").validate()
    with pytest.raises(ValueError):
        ScenarioConfig("null", corr_target="b0_with_splitter").validate()
