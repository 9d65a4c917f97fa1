"""
FeatureMatrix: numeric design matrix with feature names and provenance tags,
plus the train-split standardizer shared by the model fitters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.preprocessing import StandardScaler

from riskforge.lib.errors import MissingColumn
from riskforge.lib.tabular import PatientFrame

PROVENANCES = ("structured", "tfidf", "embedding", "indicator")

TFIDF_PREFIXES = ("disch_tfidf_svd_", "radio_tfidf_svd_")
EMBEDDING_PREFIXES = ("discharge_bert_pca_", "radiology_bert_pca_")
INDICATOR_COLUMNS = ("has_discharge_note", "has_radiology_note")


def provenance_of(name: str) -> str:
    if name.startswith(TFIDF_PREFIXES):
        return "tfidf"
    if name.startswith(EMBEDDING_PREFIXES):
        return "embedding"
    if name in INDICATOR_COLUMNS:
        return "indicator"
    return "structured"


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    names: tuple[str, ...]
    provenance: tuple[str, ...] = ()
    row_keys: tuple = field(default=(), compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        names = tuple(self.names)
        if values.shape[1] != len(names):
            raise ValueError(f"{values.shape[1]} columns but {len(names)} names")
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        provenance = tuple(self.provenance) or tuple(provenance_of(n) for n in names)
        if len(provenance) != len(names):
            raise ValueError("one provenance tag per feature")
        bad = [p for p in provenance if p not in PROVENANCES]
        if bad:
            raise ValueError(f"unknown provenance {bad[0]}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "provenance", provenance)
        object.__setattr__(self, "row_keys", tuple(self.row_keys))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.index_of(name)]

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise MissingColumn(name, "feature not in design matrix") from None

    def select(self, names) -> "FeatureMatrix":
        idx = [self.index_of(n) for n in names]
        return FeatureMatrix(self.values[:, idx], tuple(self.names[i] for i in idx),
                             tuple(self.provenance[i] for i in idx), self.row_keys)

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        keys = tuple(self.row_keys[i] for i in rows) if self.row_keys else ()
        return FeatureMatrix(self.values[rows], self.names, self.provenance, keys)

    def with_values(self, values: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(values, self.names, self.provenance, self.row_keys)


def from_frame(frame: PatientFrame, names=None) -> FeatureMatrix:
    """Masked cells come through as NaN."""
    names = list(names) if names is not None else list(frame.columns)
    values = np.column_stack([frame.values(n) for n in names]) if names else np.empty((len(frame), 0))
    return FeatureMatrix(values, tuple(names), row_keys=tuple(frame.row_keys))


def fit_standardizer(X: FeatureMatrix) -> StandardScaler:
    """Statistics come from the rows given (the training split); constant columns keep scale 1."""
    return StandardScaler().fit(X.values)


def standardize(scaler: StandardScaler, X: FeatureMatrix) -> FeatureMatrix:
    if scaler.n_features_in_ != X.n_features:
        raise ValueError(f"scaler fitted on {scaler.n_features_in_} features, got {X.n_features}")
    return X.with_values(scaler.transform(X.values))
