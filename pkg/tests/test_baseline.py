import numpy as np
import pytest
from sklearn.ensemble import RandomForestClassifier

from hiegnet import baseline as B


def blobs(seed=0, n=300, d=8, sep=3.0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n)
    X = rng.normal(size=(n, d))
    X[:, :3] += sep * np.eye(3)[y]
    return X, y


def test_separable_data():
    X, y = blobs(0)
    Xt, yt = blobs(1)
    f = B.rf_fit(X, y, B.ForestSpec(n_trees=30))
    pred, freq = B.rf_predict(f, Xt)
    assert np.mean(pred == yt) > 0.9
    np.testing.assert_allclose(freq.sum(1), 1.0)


def test_accuracy_close_to_library_forest():
    X, y = blobs(2, sep=1.0)
    Xt, yt = blobs(3, sep=1.0)
    ours = np.mean(B.rf_predict(B.rf_fit(X, y, B.ForestSpec(n_trees=100)), Xt)[0] == yt)
    ref = RandomForestClassifier(n_estimators=100, max_features=4, max_depth=10, random_state=0).fit(X, y)
    assert abs(ours - ref.score(Xt, yt)) < 0.06


def test_xor_depth_one_is_limited(oracles):
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (400, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    shallow = B.rf_fit(X, y, B.ForestSpec(n_trees=25, max_depth=1, max_features=2))
    assert np.mean(B.rf_predict(shallow, X)[0] == y) <= oracles["xor_depth1_acc_max"]
    deep = B.rf_fit(X, y, B.ForestSpec(n_trees=25, max_depth=6, max_features=2))
    assert np.mean(B.rf_predict(deep, X)[0] == y) > 0.95


def test_deterministic_and_seed_sensitive():
    X, y = blobs(4, sep=0.8)
    a = B.vote_counts(B.rf_fit(X, y, B.ForestSpec(n_trees=20, seed=1)), X)
    b = B.vote_counts(B.rf_fit(X, y, B.ForestSpec(n_trees=20, seed=1)), X)
    c = B.vote_counts(B.rf_fit(X, y, B.ForestSpec(n_trees=20, seed=2)), X)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_one_vote_per_tree_and_ties_to_lowest():
    X, y = blobs(5)
    f = B.rf_fit(X, y, B.ForestSpec(n_trees=17))
    assert np.all(B.vote_counts(f, X).sum(1) == 17)
    f.trees = f.trees[:2]
    votes = B.vote_counts(f, X)
    pred = B.rf_predict(f, X)[0]
    tie = votes.max(1) == 1
    assert np.all(pred[tie] == np.argmax(votes[tie] == 1, axis=1))


def test_missing_class_columns_are_kept():
    X, y = blobs(6)
    keep = y != 1
    f = B.rf_fit(X[keep], y[keep], n_classes=3)
    assert f.trees[0].value.shape[1] == 3
    assert np.all(B.rf_predict(f, X)[0] != 1)


def test_json_round_trip(tmp_path):
    X, y = blobs(7)
    f = B.rf_fit(X, y, B.ForestSpec(n_trees=10, seed=3))
    f.save(tmp_path / "forest.json")
    g = B.Forest.load(tmp_path / "forest.json")
    assert g.spec == f.spec
    assert np.array_equal(B.vote_counts(f, X), B.vote_counts(g, X))
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        B.Forest.load(tmp_path / "bad.json")


def test_oob_accuracy_tracks_held_out():
    X, y = blobs(8, n=600, sep=1.2)
    Xt, yt = blobs(9, n=600, sep=1.2)
    f = B.rf_fit(X, y, B.ForestSpec(n_trees=60))
    held = np.mean(B.rf_predict(f, Xt)[0] == yt)
    assert abs(B.oob_accuracy(f, X, y) - held) < 0.06


def test_input_errors():
    X, y = blobs(0)
    with pytest.raises(ValueError, match="2 classes"):
        B.rf_fit(X, np.zeros(len(y), int))
    f = B.rf_fit(X, y, B.ForestSpec(n_trees=2))
    with pytest.raises(ValueError, match="feature width"):
        B.rf_predict(f, X[:, :3])
