import numpy as np
import pytest
from scipy.special import expit
from sklearn.linear_model import LogisticRegression

from riskforge.glm import (GlmConfig, GlmFit, consolidate_features, correlation_matrix, fit_logistic,
                           likelihood_ratio_test, predict_proba, recalibrate, score_gradient, univariate_screen, vif)
from riskforge.lib.design import FeatureMatrix
from riskforge.lib.errors import Separation


def test_irls_matches_reference_solver(logistic_data):
    X, y, _ = logistic_data
    fit = fit_logistic(X, y)
    assert fit.converged
    reference = LogisticRegression(penalty=None, solver="newton-cg", tol=1e-10, max_iter=1000).fit(X, y)
    np.testing.assert_allclose(fit.coef[0], reference.intercept_[0], atol=1e-4)
    np.testing.assert_allclose(fit.coef[1:], reference.coef_[0], atol=1e-4)

    design = FeatureMatrix(X, fit.features)
    assert np.max(np.abs(score_gradient(fit, design, y))) < 1e-8
    A = np.column_stack([np.ones(len(y)), X])
    prob = expit(A @ fit.coef)
    cov = np.linalg.inv((A.T * (prob * (1 - prob))) @ A)
    np.testing.assert_allclose(fit.se, np.sqrt(np.diag(cov)), rtol=1e-8)
    np.testing.assert_allclose(fit.ci_high - fit.ci_low, 2 * 1.959964 * fit.se)
    assert 0.0 < fit.pseudo_r2 < 1.0
    np.testing.assert_allclose(predict_proba(fit, design), prob)


def test_wald_inference_flags_the_true_signal(logistic_data):
    X, y, beta = logistic_data
    fit = fit_logistic(X, y)
    assert all(fit.p[1:3] < 1e-3)
    assert fit.p[3] < 0.05
    assert fit.summary()["variable"].tolist()[:2] == ["const", "x0"]


def test_separation_raises_with_last_iterate():
    X = np.array([-2.0, -1.0, 1.0, 2.0])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    with pytest.raises(Separation) as info:
        fit_logistic(X, y, names=("score",))
    fit = info.value.fit
    assert isinstance(fit, GlmFit)
    assert not fit.converged
    assert fit.coef[1] > 0


def test_non_binary_outcome_is_rejected():
    with pytest.raises(ValueError):
        fit_logistic(np.arange(4.0), np.array([0.0, 1.0, 2.0, 1.0]))


def test_likelihood_ratio_test(logistic_data):
    X, y, _ = logistic_data
    full = fit_logistic(X[:, :3], y)
    reduced = fit_logistic(X[:, :1], y)
    stat, df, p = likelihood_ratio_test(full, reduced)
    assert df == 2
    assert stat == pytest.approx(2 * (full.loglik - reduced.loglik))
    assert p < 1e-3
    with pytest.raises(ValueError):
        likelihood_ratio_test(reduced, full)


def test_recalibrate_is_univariate():
    score = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0])
    y = np.array([0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0])
    fit = recalibrate(score, y, "NEWS2")
    assert fit.names == ("const", "NEWS2")
    assert fit.coef[1] > 0


def test_univariate_screen(logistic_data):
    X, y, _ = logistic_data
    separating = y - 0.5
    design = FeatureMatrix(np.column_stack([X[:, :2], separating]), ("x0", "x1", "leak"))
    report = univariate_screen(design, y)
    assert report.columns.tolist() == ["variable", "coef", "p", "significant", "reason"]
    rows = report.set_index("variable")
    assert rows.loc["x0", "significant"] and rows.loc["x0", "coef"] > 0
    assert rows.loc["x1", "significant"] and rows.loc["x1", "coef"] < 0
    assert rows.loc["leak", "reason"] == "Separation"
    assert not rows.loc["leak", "significant"]


def _collinear_design(rng, n=200):
    pt = rng.normal(13.0, 2.0, n)
    hgb = rng.normal(10.0, 1.5, n)
    sbp = rng.normal(120.0, 15.0, n)
    dbp = rng.normal(65.0, 10.0, n)
    columns = {
        "PT": pt, "INR": pt / 10.0 + rng.normal(0.0, 0.01, n),
        "Hemoglobin": hgb, "Hematocrit": 3.0 * hgb + rng.normal(0.0, 0.3, n),
        "SBP": sbp, "DBP": dbp, "MBP": (sbp + 2.0 * dbp) / 3.0,
        "HR": rng.normal(90.0, 15.0, n),
    }
    return FeatureMatrix(np.column_stack(list(columns.values())), tuple(columns))


def test_vif_ledger_drops_the_non_preferred_partner(rng):
    report = vif(_collinear_design(rng))
    dropped = {step.dropped: step.kept_instead for step in report.drop_sequence}
    assert dropped == {"INR": "PT", "Hematocrit": "Hemoglobin", "DBP": "MBP"}
    assert report.kept == ["PT", "Hemoglobin", "SBP", "MBP", "HR"]
    assert max(report.final.values()) <= 10.0
    assert np.isinf(report.initial["DBP"])
    table = report.table()
    assert table["dropped"].sum() == 3
    assert table.loc[table["variable"] == "HR", "kept_instead"].item() == ""


def test_vif_drops_constant_then_largest(rng):
    a = rng.normal(size=100)
    X = FeatureMatrix(np.column_stack([np.full(100, 5.0), a, a + rng.normal(0.0, 0.01, 100),
                                       rng.normal(size=100)]), ("flat", "a", "b", "c"))
    report = vif(X)
    assert report.drop_sequence[0].dropped == "flat"
    assert report.drop_sequence[0].reason == "constant column"
    assert len(report.kept) == 2 and "c" in report.kept
    with pytest.raises(ValueError):
        vif(X.select(["a"]))


def test_correlation_and_consolidation(rng):
    a = rng.normal(size=50)
    X = FeatureMatrix(np.column_stack([a, -a, rng.normal(size=50)]), ("a", "b", "c"))
    corr = correlation_matrix(X, ["a", "b"])
    assert corr.loc["a", "b"] == pytest.approx(-1.0)
    assert consolidate_features(["Lactate", "HR"], ["HR", "BUN", "Lactate", "pH"]) == ["Lactate", "HR", "BUN", "pH"]


def test_glm_config_validation():
    with pytest.raises(ValueError):
        GlmConfig(alpha=1.5)
    with pytest.raises(ValueError):
        GlmConfig(vif_warn=12.0, vif_drop=10.0)
