import numpy as np
import pytest

from riskforge.harmonization import gcs_total
from riskforge.lib.errors import OutOfRange, SingleClass, TooFewRows
from riskforge.scoring_eval import (EvalConfig, calibration, dca_grid, decision_curve, evaluate_models, news2_frame,
                                    news2_risk_band, news2_score, news2_subscores, roc, threshold_metrics)
from conftest import frame_of, load_case

GOLDEN = load_case("news2_golden.json")


@pytest.mark.parametrize("case", GOLDEN["cases"], ids=lambda c: "-".join(str(v) for v in c[:6]))
def test_news2_golden(case):
    *inputs, total, band = case
    assert news2_score(*inputs) == total
    assert news2_risk_band(total, news2_subscores(*inputs)) == band


def test_news2_vectorized_and_out_of_range():
    totals = news2_score(np.array([16.0, 25.0]), [98, 98], [120, 120], [70, 70], [37.0, 37.0], [15, 15])
    assert totals.tolist() == [0, 3]
    with pytest.raises(OutOfRange) as info:
        news2_score(16, 101, 120, 70, 37.0, 15)
    assert info.value.name == "SpO2"
    with pytest.raises(OutOfRange):
        news2_score(16, 98, 120, 70, np.nan, 15)


def test_news2_frame_reads_fahrenheit():
    frame = frame_of({"RR": [16.0, 16.0], "SpO2": [98.0, 98.0], "SBP": [120.0, 120.0], "HR": [70.0, 70.0],
                      "BT": [98.6, 104.0], "GCS_Total": [15.0, 15.0]})
    assert news2_frame(frame).tolist() == [0, 2]


def test_fractional_gcs_below_full_scores_three():
    # component means from an imputed stay rarely sum to a whole number
    total = gcs_total(3.5, 5.0, 6.0)
    assert total == 14.5
    assert news2_score(16, 98, 120, 70, 37.0, total) == 3
    assert news2_score(16, 98, 120, 70, 37.0, 15.0) == 0
    frame = frame_of({"RR": [16.0, 16.0], "SpO2": [98.0, 98.0], "SBP": [120.0, 120.0], "HR": [70.0, 70.0],
                      "BT": [98.6, 98.6], "GCS_Total": [14.5, 15.0]})
    assert news2_frame(frame).tolist() == [3, 0]


def _mann_whitney(scores, y):
    pos, neg = scores[y == 1], scores[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


@pytest.mark.parametrize("seed", range(50))
def test_auc_equals_pairwise_concordance(seed):
    rng = np.random.default_rng(seed)
    n = 40
    scores = rng.integers(0, 10, size=n).astype(float)
    y = (rng.random(n) < 0.4).astype(float)
    y[0], y[1] = 1.0, 0.0
    assert roc(scores, y).auc == pytest.approx(_mann_whitney(scores, y), abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_auc_under_monotone_transform_and_label_flip(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=60)
    y = (rng.random(60) < 0.5).astype(int)
    y[0], y[1] = 1, 0
    base = roc(scores, y).auc
    assert roc(np.exp(2.0 * scores) + 3.0, y).auc == pytest.approx(base, abs=1e-12)
    assert roc(scores, 1 - y).auc == pytest.approx(1.0 - base, abs=1e-12)


def test_roc_needs_both_classes():
    with pytest.raises(SingleClass):
        roc([0.1, 0.2], [0, 0])


PROBS = np.array([0.9, 0.6, 0.4, 0.1])
LABELS = np.array([1, 0, 1, 0])


def test_decision_curve_hand_case():
    curve = decision_curve(PROBS, LABELS, [0.3, 0.5])
    np.testing.assert_allclose(curve.net_benefit, [0.5 - 0.25 * 0.3 / 0.7, 0.0])
    np.testing.assert_allclose(curve.treat_all, [0.5 - 0.5 * 0.3 / 0.7, 0.0])
    np.testing.assert_allclose(curve.standardized, curve.net_benefit / 0.5)
    assert curve.treat_none.tolist() == [0.0, 0.0]


def test_decision_curve_reference_strategies(rng):
    y = (rng.random(200) < 0.3).astype(int)
    everyone = decision_curve(np.ones(200), y)
    nobody = decision_curve(np.zeros(200), y)
    np.testing.assert_allclose(everyone.net_benefit, everyone.treat_all)
    np.testing.assert_array_equal(nobody.net_benefit, np.zeros(99))
    grid = dca_grid()
    assert len(grid) == 99 and grid[0] == 0.01 and grid[-1] == 0.99
    with pytest.raises(ValueError):
        decision_curve(PROBS, LABELS, [0.0, 0.5])


def test_calibration_bins():
    probs = np.linspace(0.01, 0.99, 20)
    y = (probs > 0.5).astype(int)
    bins = calibration(probs, y)
    assert bins.n_bins == 10
    assert bins.count.tolist() == [2] * 10
    np.testing.assert_allclose(bins.mean_predicted, probs.reshape(10, 2).mean(axis=1))
    assert bins.event_rate[0] == 0.0 and bins.event_rate[-1] == 1.0


def test_calibration_merges_constant_bins_and_checks_inputs():
    bins = calibration(np.full(30, 0.3), np.r_[np.ones(9), np.zeros(21)])
    assert bins.n_bins == 1
    assert bins.event_rate[0] == pytest.approx(0.3)
    with pytest.raises(TooFewRows):
        calibration(PROBS, LABELS)
    with pytest.raises(ValueError):
        calibration(np.r_[np.full(10, 0.5), 1.2], np.r_[np.zeros(10), 1])


def test_threshold_metrics():
    metrics = threshold_metrics(PROBS, LABELS)
    assert metrics == {"accuracy": 0.5, "f1_pos": 0.5, "recall_pos": 0.5}


def test_evaluate_models_suite(rng):
    y = np.r_[np.ones(8), np.zeros(12)]
    probs = np.clip(0.3 + 0.4 * y + rng.normal(0.0, 0.15, 20), 0.0, 1.0)
    raw = np.r_[np.full(8, 5.0), np.full(12, 2.0)]
    report = evaluate_models({"Combined-LR": probs}, y, EvalConfig(), raw_scores={"NEWS2": raw})
    assert report.metrics["model"].tolist() == ["NEWS2", "Combined-LR"]
    assert report.curves["NEWS2"].auc == 1.0
    assert np.isnan(report.metrics.loc[0, "accuracy"])
    assert set(report.calibration["model"]) == {"Combined-LR"}
    assert set(report.roc["model"]) == {"NEWS2", "Combined-LR"}
    table = report.metrics_table()
    assert table.columns.tolist() == ["metric", "NEWS2", "Combined-LR"]
    assert table["metric"].tolist() == ["AUC", "Accuracy", "F1", "Recall"]


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(threshold=1.0)
    with pytest.raises(ValueError):
        EvalConfig(dca_start=0.5, dca_stop=0.4)
