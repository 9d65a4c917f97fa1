"""
NEWS2 baseline score and the evaluation suite: ROC/AUC, equal-frequency
calibration bins, decision curves with standardized net benefit, and
accuracy / F1 / recall at a fixed threshold.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, auc, f1_score, recall_score, roc_curve

from riskforge.harmonization import fahrenheit_to_celsius
from riskforge.lib.errors import MissingColumn, OutOfRange, SingleClass, TooFewRows
from riskforge.lib.logger import log_debug, log_info

MODULE = "scoring_eval"

NEWS2_CHART = Path(__file__).parent / "data" / "news2_chart.json"
NEWS2_PARAMETERS = ("RR", "SpO2", "SBP", "HR", "BT", "GCS_Total")
NEWS2_MAX = 18

CALIBRATION_BINS = 10
DCA_START, DCA_STOP, DCA_STEP = 0.01, 0.99, 0.01
DEFAULT_THRESHOLD = 0.5
METRIC_ROWS = ("AUC", "Accuracy", "F1", "Recall")


# === NEWS2 ===
@lru_cache(maxsize=None)
def news2_chart(path: str = str(NEWS2_CHART)) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _subscore(parameter: str, values: np.ndarray, chart: dict) -> np.ndarray:
    spec = chart[parameter]
    low, high = spec["range"]
    bad = np.isnan(values) | (values < low) | (values > high)
    if bad.any():
        first = values[bad][0]
        raise OutOfRange(parameter, f"{int(bad.sum())} values outside [{low}, {high}], e.g. {first}")
    points = np.full(values.shape, -1, dtype=np.int64)
    # a band covers (previous upper, upper]; an "open" band stops short of upper
    for band in spec["bands"]:
        upper, score = band[1], band[2]
        if upper is None:
            inside = True
        elif len(band) > 3 and band[3] == "open":
            inside = values < upper
        else:
            inside = values <= upper
        hit = (points < 0) & inside
        points[hit] = score
    return points


def news2_subscores(rr, spo2, sbp, hr, bt, gcs_total, chart: dict | None = None) -> dict:
    """Per-parameter points; `bt` in degrees Celsius. Accepts scalars or arrays."""
    chart = chart or news2_chart()
    inputs = dict(zip(NEWS2_PARAMETERS, (rr, spo2, sbp, hr, bt, gcs_total)))
    return {name: _subscore(name, np.atleast_1d(np.asarray(v, dtype=float)), chart) for name, v in inputs.items()}


def news2_score(rr, spo2, sbp, hr, bt, gcs_total, chart: dict | None = None):
    subs = news2_subscores(rr, spo2, sbp, hr, bt, gcs_total, chart)
    total = sum(subs.values())
    return int(total[0]) if np.ndim(rr) == 0 else total


def news2_risk_band(total: int, subscores: Mapping[str, int] | None = None) -> str:
    """Clinical response band: 0-4 low (a single 3 lifts it to low-medium), 5-6 medium, 7+ high."""
    if total >= 7:
        return "high"
    if total >= 5:
        return "medium"
    if subscores and any(int(np.max(v)) == 3 for v in subscores.values()):
        return "low-medium"
    return "low"


def news2_frame(frame) -> np.ndarray:
    """NEWS2 per row of a completed frame; BT is stored in Fahrenheit there."""
    for name in NEWS2_PARAMETERS:
        if name not in frame:
            raise MissingColumn(name, "needed for NEWS2")
    score = news2_score(frame.values("RR"), frame.values("SpO2"), frame.values("SBP"), frame.values("HR"),
                        fahrenheit_to_celsius(frame.values("BT")), frame.values("GCS_Total"))
    log_debug(MODULE, f"NEWS2 over {len(score)} rows, mean {np.mean(score):.2f}")
    return score


# === ROC ===
@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float

    def to_frame(self, model: str = "") -> pd.DataFrame:
        return pd.DataFrame({"model": model, "threshold": self.thresholds, "fpr": self.fpr, "tpr": self.tpr})


def _labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary 0/1")
    return y.astype(np.int64)


def roc(scores, y) -> RocCurve:
    """Every distinct score is a threshold; tied scores move in one step."""
    y = _labels(y)
    if y.min() == y.max():
        raise SingleClass("y", f"only class {y[0] if len(y) else '-'} present")
    fpr, tpr, thresholds = roc_curve(y, np.asarray(scores, dtype=float), drop_intermediate=False)
    return RocCurve(thresholds, tpr, fpr, float(auc(fpr, tpr)))


# === Calibration ===
@dataclass(frozen=True)
class CalibrationBins:
    lower: np.ndarray
    upper: np.ndarray
    count: np.ndarray
    mean_predicted: np.ndarray
    event_rate: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.count)

    def to_frame(self, model: str = "") -> pd.DataFrame:
        return pd.DataFrame({"model": model, "bin": np.arange(self.n_bins), "lower": self.lower, "upper": self.upper,
                             "count": self.count, "mean_predicted": self.mean_predicted,
                             "event_rate": self.event_rate})


def _check_probs(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if np.isnan(probs).any() or probs.min(initial=0.0) < 0.0 or probs.max(initial=1.0) > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    return probs


def calibration(probs, y, bins: int = CALIBRATION_BINS) -> CalibrationBins:
    """
    Equal-frequency bins over the stably sorted probabilities. Adjacent bins
    that hold one and the same constant probability are merged.
    """
    probs, y = _check_probs(probs), _labels(y)
    if len(probs) < bins:
        raise TooFewRows("probs", f"{len(probs)} rows for {bins} bins")
    order = np.argsort(probs, kind="mergesort")
    groups = [g for g in np.array_split(order, bins) if len(g)]
    merged = [groups[0]]
    for g in groups[1:]:
        prev = probs[merged[-1]]
        cur = probs[g]
        if prev.min() == prev.max() == cur.min() == cur.max():
            merged[-1] = np.concatenate([merged[-1], g])
        else:
            merged.append(g)
    return CalibrationBins(
        lower=np.array([probs[g].min() for g in merged]),
        upper=np.array([probs[g].max() for g in merged]),
        count=np.array([len(g) for g in merged]),
        mean_predicted=np.array([probs[g].mean() for g in merged]),
        event_rate=np.array([y[g].mean() for g in merged]),
    )


# === Decision curves ===
def dca_grid(start: float = DCA_START, stop: float = DCA_STOP, step: float = DCA_STEP) -> np.ndarray:
    return np.round(np.arange(start, stop + step / 2, step), 10)


@dataclass(frozen=True)
class DcaCurve:
    thresholds: np.ndarray
    net_benefit: np.ndarray
    treat_all: np.ndarray
    prevalence: float

    @property
    def treat_none(self) -> np.ndarray:
        return np.zeros_like(self.thresholds)

    @property
    def standardized(self) -> np.ndarray:
        return self.net_benefit / self.prevalence

    @property
    def standardized_treat_all(self) -> np.ndarray:
        return self.treat_all / self.prevalence

    def to_frame(self, model: str = "") -> pd.DataFrame:
        return pd.DataFrame({"model": model, "threshold": self.thresholds, "net_benefit": self.net_benefit,
                             "standardized_net_benefit": self.standardized, "treat_all": self.treat_all,
                             "standardized_treat_all": self.standardized_treat_all, "treat_none": self.treat_none})


def decision_curve(probs, y, grid=None) -> DcaCurve:
    """Net benefit TP/n - FP/n * t/(1-t), treating every row with prob >= t."""
    probs, y = _check_probs(probs), _labels(y)
    grid = dca_grid() if grid is None else np.asarray(grid, dtype=float)
    if np.any((grid <= 0) | (grid >= 1)):
        raise ValueError("thresholds must lie strictly inside (0, 1)")
    n = len(y)
    prevalence = float(y.mean())
    treated = probs[None, :] >= grid[:, None]
    tp = (treated & (y[None, :] == 1)).sum(axis=1)
    fp = (treated & (y[None, :] == 0)).sum(axis=1)
    odds = grid / (1.0 - grid)
    net = tp / n - fp / n * odds
    treat_all = prevalence - (1.0 - prevalence) * odds
    return DcaCurve(grid, net, treat_all, prevalence)


# === Threshold metrics ===
def threshold_metrics(probs, y, t: float = DEFAULT_THRESHOLD) -> dict:
    probs, y = _check_probs(probs), _labels(y)
    pred = (probs >= t).astype(np.int64)
    return {"accuracy": float(accuracy_score(y, pred)),
            "f1_pos": float(f1_score(y, pred, zero_division=0)),
            "recall_pos": float(recall_score(y, pred, zero_division=0))}


# === Evaluation suite ===
@dataclass(frozen=True)
class EvalConfig:
    calibration_bins: int = CALIBRATION_BINS
    threshold: float = DEFAULT_THRESHOLD
    dca_start: float = DCA_START
    dca_stop: float = DCA_STOP
    dca_step: float = DCA_STEP

    def __post_init__(self):
        if self.calibration_bins < 1:
            raise ValueError("calibration_bins must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        if not 0.0 < self.dca_start < self.dca_stop < 1.0 or self.dca_step <= 0:
            raise ValueError("decision-curve grid must lie inside (0, 1)")


@dataclass(frozen=True)
class EvalReport:
    roc: pd.DataFrame
    calibration: pd.DataFrame
    dca: pd.DataFrame
    metrics: pd.DataFrame
    curves: Mapping[str, RocCurve]

    def metrics_table(self) -> pd.DataFrame:
        """One row per metric (AUC, Accuracy, F1, Recall), one column per model."""
        table = self.metrics.set_index("model")[["auc", "accuracy", "f1_pos", "recall_pos"]].T
        table.index = list(METRIC_ROWS)
        return table.rename_axis("metric").reset_index()


def evaluate_models(probabilities: Mapping[str, np.ndarray], y, cfg: EvalConfig = EvalConfig(),
                    raw_scores: Mapping[str, np.ndarray] | None = None) -> EvalReport:
    """
    Full suite for every model in `probabilities`. Entries of `raw_scores`
    are not probabilities; they get a ROC curve and AUC only.
    """
    y = _labels(y)
    grid = dca_grid(cfg.dca_start, cfg.dca_stop, cfg.dca_step)
    rocs, cals, dcas, rows, curves = [], [], [], [], {}
    for name, scores in (raw_scores or {}).items():
        curve = roc(scores, y)
        curves[name] = curve
        rocs.append(curve.to_frame(name))
        rows.append({"model": name, "auc": curve.auc, "accuracy": np.nan, "f1_pos": np.nan, "recall_pos": np.nan})
    for name, probs in probabilities.items():
        curve = roc(probs, y)
        curves[name] = curve
        rocs.append(curve.to_frame(name))
        cals.append(calibration(probs, y, cfg.calibration_bins).to_frame(name))
        dcas.append(decision_curve(probs, y, grid).to_frame(name))
        rows.append({"model": name, "auc": curve.auc, **threshold_metrics(probs, y, cfg.threshold)})
        log_info(MODULE, f"{name}: AUC {curve.auc:.4f}, accuracy {rows[-1]['accuracy']:.4f}")
    metrics = pd.DataFrame(rows, columns=["model", "auc", "accuracy", "f1_pos", "recall_pos"])
    return EvalReport(pd.concat(rocs, ignore_index=True) if rocs else pd.DataFrame(),
                      pd.concat(cals, ignore_index=True) if cals else pd.DataFrame(),
                      pd.concat(dcas, ignore_index=True) if dcas else pd.DataFrame(),
                      metrics, curves)
