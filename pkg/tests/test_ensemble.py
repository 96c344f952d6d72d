import numpy as np
import pytest
from sklearn.base import clone

from nsdser.ensemble import FldEnsemble, balanced_threshold, evaluate


def _data(n=200, shift=1.0, seed=0, d=10):
    rng = np.random.default_rng(seed)
    X0 = rng.standard_normal((n, d))
    X1 = rng.standard_normal((n, d)) + shift * np.linspace(0, 1, d)
    return np.vstack([X0, X1]), np.repeat([0, 1], n)


def test_balanced_threshold_examples():
    assert balanced_threshold(np.array([0.0, 1.0]), np.array([2.0, 3.0])) == 1.5
    # overlapping: every cut between 1 and 2 is optimal; midpoint of the extremes
    assert balanced_threshold(np.array([0.0, 2.0]), np.array([1.0, 3.0])) == pytest.approx(1.5)


def test_separable_data_is_learned():
    X, y = _data(shift=8.0)
    m = FldEnsemble(random_state=1).fit(X, y)
    assert m.score(X, y) == 1.0 and m.report_.oob_error == 0.0
    assert m.report_.n_learners in (11, 31, 51, 101)
    assert len(m.learners_) == m.report_.n_learners
    assert m.vote_threshold_ == (m.report_.n_learners + 1) // 2


def test_label_swap_antisymmetry():
    X, y = _data(shift=0.6, seed=3)
    a = FldEnsemble(n_learners_grid=(11,), random_state=2).fit(X, y)
    b = FldEnsemble(n_learners_grid=(11,), random_state=2).fit(X, 1 - y)
    np.testing.assert_array_equal(a.stego_votes(X), len(b.learners_) - b.stego_votes(X))


def test_deterministic_given_seed():
    X, y = _data(shift=0.5)
    a = FldEnsemble(random_state=4).fit(X, y)
    b = FldEnsemble(random_state=4).fit(X, y)
    assert np.array_equal(a.decision_function(X), b.decision_function(X))


def test_estimator_api_and_validation():
    m = FldEnsemble(d_sub=3)
    assert clone(m).get_params()["d_sub"] == 3
    X, y = _data(n=30)
    with pytest.raises(ValueError):
        m.fit(X, y)  # fewer than 50 per class
    with pytest.raises(ValueError):
        FldEnsemble(n_learners_grid=(10,)).fit(*_data())
    with pytest.raises(ValueError):
        FldEnsemble().fit(*_data()[:1], np.zeros(400))


def test_constant_features_do_not_break_training():
    X, y = _data(shift=3.0)
    X[:, :4] = 1.0
    m = FldEnsemble(random_state=0).fit(X, y)
    assert m.score(X, y) > 0.9


def test_kv_roundtrip_predicts_identically():
    X, y = _data(shift=1.0)
    m = FldEnsemble(random_state=5).fit(X, y)
    r = FldEnsemble.from_kv(m.to_kv())
    assert np.array_equal(m.predict(X), r.predict(X))
    assert np.array_equal(m.decision_function(X), r.decision_function(X))


def test_evaluate_report():
    class Fixed:
        def predict(self, X):
            return (X[:, 0] > 0).astype(int)

    cover = np.array([[-1.0], [-1.0], [1.0], [-1.0]])
    stego = np.array([[1.0], [1.0], [-1.0], [1.0]])
    r = evaluate(Fixed(), cover, stego)
    assert (r.accuracy, r.p_fa, r.p_md, r.advantage, r.n_queries) == (0.75, 0.25, 0.25, 0.5, 8)
