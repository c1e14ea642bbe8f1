import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metamob.linmod import DegenerateNode, fit_node, objective


def lstsq_fit(y, D):
    coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    r = y - D @ coef
    return coef, float(r @ r)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(4, 60))
def test_plain_node_matches_least_squares(seed, n):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, 2, n)
    t[:2] = (0, 1)
    y = rng.normal(size=n) * 3 + 2 * t
    fit = fit_node(y, t)
    coef, rss = lstsq_fit(y, np.column_stack([np.ones(n), t]))
    assert np.allclose([fit.gamma_hat, fit.theta_hat], coef)
    assert fit.rss == pytest.approx(rss, rel=1e-9, abs=1e-9)
    assert objective(fit) == fit.rss
    assert fit.sigma_hat_sq == pytest.approx(rss / n)
    # estimating equations hold at the estimate
    assert np.allclose(fit.scores.sum(axis=0), 0, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_stratified_node_matches_dummy_regression(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 6))
    n = int(rng.integers(3 * K, 80))
    g = rng.integers(1, K + 1, n)
    t = rng.integers(0, 2, n)
    t[:2] = (0, 1)
    g[:2] = 1
    y = rng.normal(size=n) + g * 1.5 - t
    fit = fit_node(y, t, g, K + 1)  # one stratum id never present
    present = np.unique(g)
    D = np.column_stack([(g == k).astype(float) for k in present] + [t])
    coef, rss = lstsq_fit(y, D)
    assert fit.theta_hat == pytest.approx(coef[-1], abs=1e-9)
    assert np.allclose(fit.gamma_hat[present - 1], coef[:-1])
    assert np.all(np.isnan(np.delete(fit.gamma_hat, present - 1)))
    assert len(fit.gamma_hat) == K + 1
    assert fit.rss == pytest.approx(rss, rel=1e-9, abs=1e-9)
    assert np.allclose(fit.scores.sum(axis=0), 0, atol=1e-8)


def test_singleton_strata_scores_are_dropped():
    y = np.array([1.0, 2.0, 4.0, 4.0, 7.0])
    t = np.array([0, 1, 0, 1, 1])
    g = np.array([1, 1, 2, 2, 3])
    fit = fit_node(y, t, g)
    # stratum 3 holds one subject, its residual is exactly zero
    assert fit.scores.shape == (5, 3)


def test_degenerate_nodes():
    with pytest.raises(DegenerateNode):
        fit_node([1.0, 2.0, 3.0], [1, 1, 1])
    with pytest.raises(DegenerateNode):
        fit_node([1.0, 2.0, 3.0, 4.0], [0, 0, 1, 1], [1, 1, 2, 2])
    with pytest.raises(ValueError):
        fit_node([1.0], [1])


def test_constant_response_gives_zero_effect():
    fit = fit_node(np.full(10, 4.0), np.resize([0, 1], 10))
    assert fit.theta_hat == 0.0 and fit.gamma_hat == 4.0 and fit.rss == 0.0
