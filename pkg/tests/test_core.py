import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metamob.core import (METHODS, DataError, IpdDataset, ModelSpec, RandomEffects, Tree, build_tree,
                          design_vectors, predict_node)

from conftest import make_dataset


def small_tree():
    leaf = lambda g, t, n: {"gamma": g, "theta": t, "n_obs": n}
    return build_tree((1, 30.0, (0, 17.0, leaf(17.5, -5, 30), leaf(30, 0, 25)),
                       (4, 63.0, leaf(30, 0, 22), leaf(42.5, 5, 40))),
                      [f"X{j + 1}" for j in range(5)])


def test_model_spec_mapping_is_bijective():
    specs = [ModelSpec.from_method(m) for m in METHODS]
    assert specs == [ModelSpec.M0, ModelSpec.M1, ModelSpec.M2, ModelSpec.M3]
    assert [s.method for s in specs] == list(METHODS)
    assert [s.n_components for s in specs] == [0, 1, 2, 1]
    assert ModelSpec.M3.stratified and not ModelSpec.M2.stratified
    with pytest.raises(ValueError):
        ModelSpec.from_method("cart")


def test_dataset_validation():
    X = np.zeros((4, 1))
    with pytest.raises(DataError, match="lengths"):
        IpdDataset([1, 2, 3], [0, 1, 0, 1], [1, 1, 2, 2], X)
    with pytest.raises(DataError, match="0 and 1"):
        IpdDataset([1, 2, 3, 4], [0, 2, 0, 1], [1, 1, 2, 2], X)
    with pytest.raises(DataError, match="cover"):
        IpdDataset([1, 2, 3, 4], [0, 1, 0, 1], [1, 1, 3, 3], X)
    with pytest.raises(DataError, match="non-finite"):
        IpdDataset([1, np.nan, 3, 4], [0, 1, 0, 1], [1, 1, 2, 2], X)
    d = IpdDataset([1, 2, 3, 4], [0, 1, 0, 1], [1, 1, 2, 2], X)
    assert (d.n, d.p, d.K) == (4, 1, 2)
    assert d.covariate_names == ("X1",)
    with pytest.raises(ValueError):
        d.y[0] = 5.0


def test_csv_round_trip_is_exact(tmp_path, rng):
    d = make_dataset(rng, names=("age", "bmi", "score"))
    path = tmp_path / "d.csv"
    d.to_csv(path)
    e = IpdDataset.from_csv(path)
    assert e.covariate_names == d.covariate_names
    for a in ("y", "trt", "trial", "X"):
        assert np.array_equal(getattr(d, a), getattr(e, a))


@pytest.mark.parametrize("body, msg", [
    ("y,trt,trial,x\n1,0,1,2\n1,1,1,abc\n", r":3: column 'x': not a number"),
    ("y,trt,trial,x\n1,0,1,2\n1,2,1,3\n", r":3: column 'trt'"),
    ("y,trt,x\n1,0,2\n", "missing required"),
    ("y,trt,trial,x\n1,0,1\n", r":2: expected 4 fields"),
    ("y,trt,trial,x\n1,0,1.5,2\n", r":2: column 'trial': expected an integer"),
    ("y,trt,trial,x\n1,0,1,nan\n", "non-finite"),
    ("", "empty file"),
])
def test_csv_diagnostics_carry_location(tmp_path, body, msg):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(DataError, match=msg):
        IpdDataset.from_csv(path)


def test_tree_prediction_and_ids():
    tree = small_tree()
    assert tree.n_terminals == 4
    assert [t.node_id for t in tree.terminals()] == [1, 2, 3, 4]
    X = np.zeros((5, 5))
    X[:, 1] = [30, 30, 31, 31, 10]
    X[:, 0] = [17, 18, 0, 0, 17.0001]
    X[:, 4] = [0, 0, 63, 64, 0]
    assert list(tree.predict(X)) == [1, 2, 3, 4, 2]
    assert [predict_node(tree, x) for x in X] == [1, 2, 3, 4, 2]
    assert tree.splits() == [(0, 1, 30.0), (1, 0, 17.0), (1, 4, 63.0)]


def test_tree_json_round_trip_with_stratified_gamma():
    tree = small_tree().with_params([(1.0, np.nan), (2.0, 3.0), (4.0, 5.0), (6.0, 7.0)], [1, 2, 3, 4])
    text = tree.to_json()
    json.loads(text)  # strict JSON: NaN must be encoded as null
    assert "NaN" not in text
    back = Tree.from_json(text)
    assert back.structure() == tree.structure()
    g = back.terminals()[0].gamma
    assert g[0] == 1.0 and np.isnan(g[1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_tree_dict_round_trip_property(seed):
    rng = np.random.default_rng(seed)

    def rand_spec(depth):
        if depth == 0 or rng.random() < 0.3:
            return {"gamma": float(rng.normal()), "theta": float(rng.normal()), "n_obs": int(rng.integers(20, 99))}
        return (int(rng.integers(0, 3)), float(rng.normal()), rand_spec(depth - 1), rand_spec(depth - 1))

    tree = build_tree(rand_spec(4), ["a", "b", "c"])
    back = Tree.from_dict(json.loads(json.dumps(tree.to_dict())))
    assert back == tree
    X = rng.normal(size=(50, 3))
    assert np.array_equal(back.predict(X), tree.predict(X))


def test_design_vectors_layout(rng):
    d = make_dataset(rng, n=12, K=3)
    assign = np.resize([1, 2], 12)
    for spec, q, r in [(ModelSpec.M0, 4, 0), (ModelSpec.M1, 4, 3), (ModelSpec.M2, 4, 6), (ModelSpec.M3, 8, 3)]:
        X, Z = design_vectors(d, assign, spec)
        assert X.shape == (12, q) and Z.shape == (12, r)
        # node treatment columns sum to trt
        assert np.array_equal(X[:, -2:].sum(axis=1), d.trt)
    X, Z = design_vectors(d, assign, ModelSpec.M3)
    i = 4
    assert X[i, (assign[i] - 1) * 3 + d.trial[i] - 1] == 1.0 and X[i, :6].sum() == 1.0
    assert np.array_equal(Z[:, d.trial[i] - 1] * 0 + Z.sum(axis=1), d.trt.astype(float))


def test_random_effects_offset():
    re = RandomEffects(np.array([1.0, -1.0]), np.array([0.5, 2.0]))
    assert np.allclose(re.offset([1, 2, 2], [1, 0, 1]), [1.5, -1.0, 1.0])
