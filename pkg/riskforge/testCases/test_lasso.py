import numpy as np
import pytest
from scipy.special import expit

from riskforge.glm import fit_logistic
from riskforge.lasso import (CvCurve, LassoConfig, binomial_deviance, cv_deviance, fit_lasso, lambda_grid, lambda_max,
                             lasso_path, select_lambda, selected_features, stratified_folds)
from riskforge.lib.design import FeatureMatrix
from riskforge.lib.errors import DegenerateFold


def test_lambda_max_zeroes_every_coefficient(logistic_data):
    X, y, _ = logistic_data
    lam = lambda_max(X, y) * (1 + 1e-9)
    fit = fit_lasso(X, y, lam)
    assert fit.nonzero == []
    assert fit.intercept == pytest.approx(np.log(y.mean() / (1 - y.mean())), abs=1e-6)
    # just below the bound one coefficient enters
    assert len(fit_lasso(X, y, lambda_max(X, y) * 0.95).nonzero) >= 1


def test_unpenalized_fit_matches_irls(logistic_data):
    X, y, _ = logistic_data
    fit = fit_lasso(X, y, 0.0, tol=1e-10)
    reference = fit_logistic(X, y)
    assert fit.intercept == pytest.approx(reference.coef[0], abs=1e-4)
    np.testing.assert_allclose(fit.coef, reference.coef[1:], atol=1e-4)


def test_path_grows_the_active_set(logistic_data):
    X, y, _ = logistic_data
    grid = lambda_grid(lambda_max(X, y), size=10, ratio=1e-2)
    assert grid[0] > grid[-1]
    assert grid[-1] == pytest.approx(grid[0] * 1e-2)
    path = lasso_path(X, y, grid)
    assert path.nonzero_counts[0] == 0
    assert path.nonzero_counts[-1] >= 3


def test_stratified_folds_follow_row_identity(logistic_data):
    _, y, _ = logistic_data
    keys = [1000 + i for i in range(len(y))]
    folds = stratified_folds(keys, y, 5, seed=3)
    for label in (0, 1):
        counts = np.bincount(folds[y == label], minlength=5)
        assert counts.max() - counts.min() <= 1
    np.testing.assert_array_equal(folds, stratified_folds(keys, y, 5, seed=3))
    assert not np.array_equal(folds, stratified_folds(keys, y, 5, seed=4))

    order = np.random.default_rng(0).permutation(len(y))
    shuffled = stratified_folds([keys[i] for i in order], y[order], 5, seed=3)
    np.testing.assert_array_equal(shuffled, folds[order])


def test_folds_need_enough_rows_per_class():
    with pytest.raises(DegenerateFold):
        stratified_folds([], np.array([0, 0, 0, 1, 1]), 3, seed=0)


def _curve(lam_min, lam_1se):
    grid = np.array([lam_1se, lam_min])
    zeros = np.zeros(2)
    return CvCurve(grid, zeros, zeros, np.zeros((2, 2)), lam_min, lam_1se, lam_min, "min", 2, 0)


def test_selection_rules():
    curve = _curve(0.01, 0.1)
    assert select_lambda(curve, "min") == 0.01
    assert select_lambda(curve, "1se") == 0.1
    assert select_lambda(curve, "pct75") == pytest.approx(10 ** -1.25)
    with pytest.raises(ValueError):
        select_lambda(curve, "max")


def test_cv_deviance_and_refit(logistic_data):
    X, y, _ = logistic_data
    design = FeatureMatrix(X, tuple(f"x{i}" for i in range(X.shape[1])), row_keys=range(len(y)))
    curve = cv_deviance(design, y, grid_size=20, folds=5, seed=1)
    assert curve.fold_deviance.shape == (5, 20)
    assert curve.lambda_min <= curve.lambda_selected <= curve.lambda_1se
    assert curve.to_frame().columns.tolist() == ["lambda", "mean_deviance", "se_deviance"]
    again = cv_deviance(design, y, grid_size=20, folds=5, seed=1)
    np.testing.assert_array_equal(curve.mean_deviance, again.mean_deviance)

    chosen = selected_features(design, y, curve.lambda_selected)
    assert {"x0", "x1"} <= set(chosen)
    assert chosen == [n for n in design.names if n in chosen]
    with pytest.raises(ValueError):
        selected_features(design, y, 0.0)


def test_solution_satisfies_optimality_conditions(logistic_data):
    X, y, _ = logistic_data
    design = FeatureMatrix(X, tuple(f"x{i}" for i in range(X.shape[1])), row_keys=range(len(y)))
    curve = cv_deviance(design, y, grid_size=20, folds=5, seed=1)
    lam = float(curve.lambda_grid[3])
    fit = fit_lasso(X, y, lam, tol=1e-10)
    prob = expit(fit.intercept + X @ fit.coef)
    grad = X.T @ (prob - y) / len(y)
    assert np.mean(prob - y) == pytest.approx(0.0, abs=1e-8)
    active = fit.coef != 0.0
    assert active.any() and not active.all()
    np.testing.assert_allclose(grad[active], -lam * np.sign(fit.coef[active]), atol=1e-7)
    assert np.all(np.abs(grad[~active]) <= lam + 1e-8)


def test_null_deviance_at_lambda_max(logistic_data):
    X, y, _ = logistic_data
    fit = fit_lasso(X, y, lambda_max(X, y) * (1 + 1e-9))
    null = binomial_deviance(y, np.full(len(y), y.mean()))
    assert binomial_deviance(y, expit(fit.intercept + X @ fit.coef)) == pytest.approx(null, abs=1e-9)


def test_planted_signals_are_recovered():
    rng = np.random.default_rng(11)
    n, p = 1000, 50
    X = rng.normal(size=(n, p))
    beta = np.zeros(p)
    beta[:5] = [1.0, -1.0, 0.8, -0.8, 0.7]
    y = (rng.random(n) < expit(-0.3 + X @ beta)).astype(float)
    design = FeatureMatrix(X, tuple(f"x{i}" for i in range(p)), row_keys=range(n))
    curve = cv_deviance(design, y, grid_size=30, folds=5, seed=2)
    chosen = selected_features(design, y, curve.lambda_selected)
    assert {"x0", "x1", "x2", "x3", "x4"} <= set(chosen)
    assert len(chosen) < 25


def test_lasso_config_validation():
    with pytest.raises(ValueError):
        LassoConfig(folds=1)
    with pytest.raises(ValueError):
        LassoConfig(rule="best")
