"""sklearn facade tests: fit/predict plumbing, label encoding, input
validation, and get_params round-trips for model selection."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dascan.errors import ShapeError
from dascan.estimator import ScanImageClassifier


def tiny_xy(n=12, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 3, 64, 64), dtype=np.float32)
    y = np.array(["cat", "dog"] * (n // 2))
    return X, y


def fast_clf(**kw):
    defaults = dict(epochs=1, batch_size=6, seed=0)
    defaults.update(kw)
    return ScanImageClassifier(**defaults)


def test_fit_predict_shapes_and_label_decoding():
    X, y = tiny_xy()
    clf = fast_clf().fit(X, y)
    pred = clf.predict(X)
    assert pred.shape == (len(X),)
    assert set(pred) <= {"cat", "dog"}     # predictions use original labels
    np.testing.assert_array_equal(clf.classes_, ["cat", "dog"])


def test_predict_proba_rows_sum_to_one():
    X, y = tiny_xy()
    proba = fast_clf().fit(X, y).predict_proba(X)
    assert proba.shape == (len(X), 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
    assert proba.min() >= 0.0


def test_decision_function_batches_consistently():
    X, y = tiny_xy()
    clf = fast_clf(batch_size=4).fit(X, y)
    wide = clf.decision_function(X)
    clf.batch_size = 3                     # re-chunking must not change output
    np.testing.assert_allclose(clf.decision_function(X), wide, atol=1e-6)


def test_score_uses_accuracy():
    X, y = tiny_xy()
    clf = fast_clf().fit(X, y)
    assert clf.score(X, y) == pytest.approx(np.mean(clf.predict(X) == y))


def test_predict_before_fit_raises():
    X, _ = tiny_xy(4)
    with pytest.raises(NotFittedError):
        ScanImageClassifier().predict(X)


def test_rejects_malformed_inputs():
    X, y = tiny_xy(4)
    with pytest.raises(ShapeError):
        fast_clf().fit(X[:, :2], y[:4])
    with pytest.raises(ShapeError):
        fast_clf().fit(X.reshape(4, -1), y[:4])
    with pytest.raises(ShapeError):
        fast_clf().fit(X, y[:3])


def test_get_params_and_clone_roundtrip():
    clf = ScanImageClassifier(epochs=2, lr=5e-4, use_das=False, seed=7)
    params = clf.get_params()
    assert params["lr"] == 5e-4 and params["use_das"] is False
    twin = clone(clf)
    assert twin.get_params() == params


def test_feature_toggles_reach_the_model():
    X, y = tiny_xy(8)
    slim = fast_clf(use_das=False, use_convpos=False, use_convffn=False)
    slim.fit(X, y)
    assert not slim.state_.model.config.use_das
    assert not any(".opn." in k for k in slim.state_.model.params)


def test_integer_labels_survive_roundtrip():
    X, _ = tiny_xy(8)
    y = np.array([3, 9, 3, 9, 3, 9, 3, 9])
    clf = fast_clf().fit(X, y)
    np.testing.assert_array_equal(clf.classes_, [3, 9])
    assert set(clf.predict(X)) <= {3, 9}


def test_history_records_training_rows():
    X, y = tiny_xy(8)
    clf = fast_clf(epochs=2, batch_size=8).fit(X, y)
    assert [r["split"] for r in clf.history_] == ["train", "train"]
