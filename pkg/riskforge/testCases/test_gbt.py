import numpy as np
import pytest
from scipy.special import expit

from riskforge.gbt import (GbtConfig, dumps, fit_gbt, importance_table, loads, predict_proba, top_k_features,
                           training_loss)
from riskforge.lib.design import FeatureMatrix
from riskforge.lib.errors import IoFailure


def _design(logistic_data):
    X, y, _ = logistic_data
    return FeatureMatrix(X, tuple(f"x{i}" for i in range(X.shape[1]))), y


def test_training_loss_decreases_with_more_trees(logistic_data):
    X, y = _design(logistic_data)
    model = fit_gbt(X, y, GbtConfig(n_trees=40, learning_rate=0.1, subsample=1.0))
    losses = [training_loss(model, X, y, k) for k in (0, 10, 20, 40)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[0] == pytest.approx(-(y.mean() * np.log(y.mean()) + (1 - y.mean()) * np.log(1 - y.mean())))


def test_fit_is_seeded(logistic_data):
    X, y = _design(logistic_data)
    cfg = GbtConfig(n_trees=15, seed=5)
    np.testing.assert_array_equal(predict_proba(fit_gbt(X, y, cfg), X), predict_proba(fit_gbt(X, y, cfg), X))


def test_text_round_trip_predicts_identically(logistic_data):
    X, y = _design(logistic_data)
    model = fit_gbt(X, y, GbtConfig(n_trees=20))
    back = loads(dumps(model))
    assert back.names == model.names
    np.testing.assert_array_equal(predict_proba(back, X), predict_proba(model, X))
    np.testing.assert_array_equal(back.importance_gain, model.importance_gain)


def test_loads_rejects_foreign_text():
    with pytest.raises(IoFailure):
        loads("xgboost model\n")
    with pytest.raises(IoFailure):
        loads("riskforge-gbt v1\nnames\tx0\n")


def test_missing_values_follow_the_left_branch():
    X = np.array([[0.0], [1.0], [2.0], [3.0], [np.nan]])
    y = np.array([0.0, 0.0, 1.0, 1.0, 0.0])
    model = fit_gbt(X, y, GbtConfig(n_trees=5, max_depth=1, subsample=1.0, learning_rate=0.5))
    prob = predict_proba(model, X)
    assert prob[4] == pytest.approx(prob[0])
    assert prob[3] > prob[0]


def test_importance_ranks_signal_features_first(logistic_data):
    X, y = _design(logistic_data)
    model = fit_gbt(X, y, GbtConfig(n_trees=60))
    top = top_k_features(model, 2)
    assert set(top) == {"x0", "x1"}
    table = importance_table(model)
    assert table["feature"].tolist()[:2] == top
    assert table["relative_gain"].sum() == pytest.approx(1.0)
    assert (np.diff(table["gain"]) <= 0).all()
    assert len(top_k_features(model, 100)) == len(table)
    with pytest.raises(ValueError):
        top_k_features(model, 0)


def test_single_stump_leaves_match_newton_step():
    X = np.arange(1.0, 7.0).reshape(-1, 1)
    y = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
    model = fit_gbt(X, y, GbtConfig(n_trees=1, max_depth=1, learning_rate=1.0, subsample=1.0, reg_lambda=1.0))
    assert model.base_score == pytest.approx(0.0, abs=1e-15)
    tree = model.trees[0]
    assert tree.feature.tolist() == [0, -1, -1]
    assert tree.threshold[0] == 3.5
    # g = p - y = +-0.5, h = 0.25 on three rows per side: w = -G / (H + lambda)
    assert tree.weight[tree.left[0]] == pytest.approx(-1.5 / 1.75)
    assert tree.weight[tree.right[0]] == pytest.approx(1.5 / 1.75)
    assert tree.gain[0] == pytest.approx(2.25 / 1.75)
    np.testing.assert_allclose(predict_proba(model, X), expit(np.r_[np.full(3, -6 / 7), np.full(3, 6 / 7)]))


@pytest.mark.parametrize("label, clamp", [(1.0, 10.0), (0.0, -10.0)])
def test_base_score_is_clamped_for_a_single_class(label, clamp):
    X = np.arange(8.0).reshape(-1, 1)
    y = np.full(8, label)
    assert fit_gbt(X, y, GbtConfig(n_trees=0)).base_score == clamp
    prob = predict_proba(fit_gbt(X, y, GbtConfig(n_trees=3, subsample=1.0)), X)
    assert np.all(np.isfinite(prob))


def test_gbt_config_validation():
    with pytest.raises(ValueError):
        GbtConfig(subsample=0.0)
    with pytest.raises(ValueError):
        GbtConfig(max_depth=0)
