import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from progsel.mart import MartModel, MartParams, RegressionTree, TrainingError, fit_tree, train_mart

from reference_tree import reference_tree


def mixed_data(rng, n, d):
    X = np.empty((n, d))
    for j in range(d):
        if j % 2:
            X[:, j] = rng.integers(0, rng.integers(2, 12), n)  # few distinct values
        else:
            X[:, j] = rng.normal(size=n)
    y = X[:, 0] * 2 + (X[:, 1] > 3) + rng.normal(scale=0.3, size=n)
    return X, y


def test_params_defaults_and_validation():
    p = MartParams()
    assert (p.iterations, p.max_leaves, p.shrinkage, p.subsample, p.min_leaf) == (200, 30, 0.1, 0.7, 5)
    for bad in ({"iterations": -1}, {"max_leaves": 0}, {"shrinkage": 0}, {"shrinkage": 1.5},
                {"subsample": 0}, {"min_leaf": 0}):
        with pytest.raises(ValueError):
            MartParams(**bad)


def test_constant_residuals_single_leaf():
    X = np.random.default_rng(0).normal(size=(50, 3))
    t = fit_tree(X, np.full(50, 2.5))
    assert t.n_leaves == 1
    assert np.all(t.predict(X) == 2.5)


def test_separable_residuals_root_split():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(80, 4))
    r = np.where(X[:, 2] <= 0.1, -1.0, 3.0)
    t = fit_tree(X, r, max_leaves=30, min_leaf=1)
    assert t.feature[0] == 2
    lo = X[X[:, 2] <= 0.1, 2].max()
    hi = X[X[:, 2] > 0.1, 2].min()
    assert t.threshold[0] == pytest.approx((lo + hi) / 2)
    assert np.sum((t.predict(X) - r) ** 2) == 0.0


def test_empty_input_rejected():
    with pytest.raises(TrainingError):
        fit_tree(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(TrainingError):
        train_mart(np.zeros((0, 2)), np.zeros(0))


@pytest.mark.parametrize("seed", range(40))
def test_stump_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(12, 200)), int(rng.integers(1, 6))
    X, y = mixed_data(rng, n, max(d, 2))
    min_leaf = int(rng.integers(1, 6))
    t = fit_tree(X, y, max_leaves=2, min_leaf=min_leaf)
    ref_pred, ref_splits, n_leaves = reference_tree(X, y, 2, min_leaf)
    assert t.n_leaves == n_leaves
    if ref_splits:
        assert (int(t.feature[0]), float(t.threshold[0])) == ref_splits[0]
    np.testing.assert_allclose(t.predict(X), ref_pred, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_tree_matches_reference(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(30, 400))
    X, y = mixed_data(rng, n, 5)
    max_leaves, min_leaf = int(rng.integers(2, 31)), int(rng.integers(1, 8))
    t = fit_tree(X, y, max_leaves, min_leaf)
    ref_pred, ref_splits, n_leaves = reference_tree(X, y, max_leaves, min_leaf)
    assert t.n_leaves == n_leaves <= max_leaves
    np.testing.assert_allclose(t.predict(X), ref_pred, rtol=0, atol=1e-9)


def test_leaf_limit_and_feature_range():
    rng = np.random.default_rng(3)
    X, y = mixed_data(rng, 500, 6)
    t = fit_tree(X, y, max_leaves=7, min_leaf=5)
    assert t.n_leaves <= 7
    internal = t.feature >= 0
    assert np.all(t.feature[internal] < X.shape[1])
    assert np.count_nonzero(internal) == t.n_leaves - 1


def test_constant_labels_predict_base():
    X = np.random.default_rng(0).normal(size=(40, 3))
    m = train_mart(X, np.full(40, 0.7), MartParams(iterations=5))
    np.testing.assert_array_equal(m.predict(X), np.full(40, 0.7))
    assert len(m.trees) == 5


def test_two_clusters_first_iteration():
    # one feature, two clusters: a full-shrinkage stump recovers both cluster means
    x = np.r_[np.zeros(20), np.ones(30)][:, None]
    rng = np.random.default_rng(5)
    y = np.r_[1.0 + rng.normal(scale=0.1, size=20), 4.0 + rng.normal(scale=0.1, size=30)]
    within = (np.sum((y[:20] - y[:20].mean()) ** 2) + np.sum((y[20:] - y[20:].mean()) ** 2)) / 50
    m = train_mart(x, y, MartParams(iterations=1, shrinkage=1.0, subsample=1.0), track_mse=True)
    assert m.train_mse[1] == pytest.approx(within, rel=1e-12, abs=1e-15)
    # with shrinkage s the residual shrinks by (1 - s) between clusters
    s = 0.1
    m = train_mart(x, y, MartParams(iterations=1, shrinkage=s, subsample=1.0), track_mse=True)
    between = (20 * (y[:20].mean() - y.mean()) ** 2 + 30 * (y[20:].mean() - y.mean()) ** 2) / 50
    assert m.train_mse[1] == pytest.approx(within + (1 - s) ** 2 * between, rel=1e-9)


def test_prediction_formula():
    m = MartModel(base=0.3, trees=[], shrinkage=0.1, n_features=2)
    np.testing.assert_array_equal(m.predict(np.zeros((3, 2))), np.full(3, 0.3))
    stump = RegressionTree(np.array([0, -1, -1]), np.array([0.5, 0, 0]), np.array([1, -1, -1]),
                           np.array([2, -1, -1]), np.array([0.0, -2.0, 5.0]))
    m = MartModel(base=0.3, trees=[stump], shrinkage=0.1, n_features=2)
    assert m.predict(np.array([[0.2, 9.0]]))[0] == 0.3 + 0.1 * -2.0
    assert m.predict(np.array([[0.9, 9.0]]))[0] == 0.3 + 0.1 * 5.0


def test_masked_sentinel_invariance():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(200, 4))
    X[:, 3] = 0.0  # a masked feature held at the sentinel
    y = X[:, 0] + rng.normal(scale=0.1, size=200)
    m = train_mart(X, y, MartParams(iterations=20))
    used = {int(f) for t in m.trees for f in t.feature if f >= 0}
    assert 3 not in used
    X2 = X.copy()
    X2[:, 3] = -123.0
    np.testing.assert_array_equal(m.predict(X), m.predict(X2))


def test_feature_count_checked():
    m = train_mart(np.zeros((10, 3)) + np.arange(10)[:, None], np.arange(10.0), MartParams(iterations=2))
    with pytest.raises(TrainingError):
        m.predict(np.zeros((1, 2)))


def test_round_trip_bit_exact():
    rng = np.random.default_rng(11)
    X, y = mixed_data(rng, 300, 6)
    m = train_mart(X, y, MartParams(iterations=30), schema_version="fs1-test")
    back = MartModel.loads(m.dumps())
    np.testing.assert_array_equal(back.predict(X), m.predict(X))
    assert back.dumps() == m.dumps()
    assert json.loads(m.dumps())["schema_version"] == "fs1-test"


def test_deterministic_under_seed():
    rng = np.random.default_rng(12)
    X, y = mixed_data(rng, 300, 6)
    a = train_mart(X, y, MartParams(iterations=15, seed=4))
    b = train_mart(X, y, MartParams(iterations=15, seed=4))
    c = train_mart(X, y, MartParams(iterations=15, seed=5))
    assert a.dumps() == b.dumps()
    assert a.dumps() != c.dumps()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mse_non_increasing_without_subsampling(seed):
    rng = np.random.default_rng(seed)
    X, y = mixed_data(rng, int(rng.integers(20, 300)), 4)
    m = train_mart(X, y, MartParams(iterations=40, subsample=1.0), track_mse=True)
    assert np.all(np.diff(m.train_mse) <= 1e-12 * max(m.train_mse[0], 1e-300))


@pytest.mark.parametrize("seed", range(10))
def test_subsampled_tree_equals_tree_on_sampled_rows(seed):
    from progsel.mart import _Prepared

    rng = np.random.default_rng(300 + seed)
    X, y = mixed_data(rng, int(rng.integers(20, 400)), 5)
    X = np.c_[X, rng.normal(size=len(y))]  # one presorted column besides the histogram ones
    mask = np.zeros(len(y), dtype=bool)
    mask[rng.choice(len(y), size=max(1, int(0.7 * len(y))), replace=False)] = True
    sub = _Prepared.build(np.ascontiguousarray(X)).grow(y, mask, 30, 5)
    ref_pred, _, n_leaves = reference_tree(X[mask], y[mask], 30, 5)
    assert sub.n_leaves == n_leaves
    np.testing.assert_allclose(sub.predict(X[mask]), ref_pred, rtol=0, atol=1e-9)
