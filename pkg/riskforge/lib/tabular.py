"""
PatientFrame: column-oriented table with an explicit per-cell missing mask.

Masked cells always hold NaN so that pandas statistics skip them; the mask is
the source of truth for missingness, which keeps a zero-filled cell
distinguishable from a missing one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from riskforge.lib.artifacts import atomic_output
from riskforge.lib.errors import IoFailure, KeyMissing, MissingColumn, NonNumericColumn

KEY_COLUMNS = ("subject_id", "hadm_id", "stay_id")
NUMERIC_KINDS = ("int", "float", "time")
COLLISION_SUFFIX = "_r"


class PatientFrame:
    """Immutable after construction; every operation returns a new frame."""

    __slots__ = ("_data", "_mask")

    def __init__(self, data: pd.DataFrame, mask: np.ndarray | None = None):
        data = data.reset_index(drop=True)
        if mask is None:
            mask = data.isna().to_numpy()
        mask = np.array(mask, dtype=bool, copy=True).reshape(data.shape)
        if mask.any():
            data = data.mask(mask)
        mask.flags.writeable = False
        self._data = data
        self._mask = mask

    # ---- introspection ----
    @property
    def data(self) -> pd.DataFrame:
        return self._data

    @property
    def mask(self) -> np.ndarray:
        return self._mask

    @property
    def columns(self) -> list[str]:
        return list(self._data.columns)

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, name: str) -> bool:
        return name in self._data.columns

    def __repr__(self) -> str:
        return f"PatientFrame(rows={len(self)}, columns={self.columns}, masked={int(self._mask.sum())})"

    def _col_index(self, name: str) -> int:
        if name not in self._data.columns:
            raise MissingColumn(name, "column not in frame")
        return self._data.columns.get_loc(name)

    def is_numeric(self, name: str) -> bool:
        self._col_index(name)
        return pd.api.types.is_numeric_dtype(self._data[name])

    def values(self, name: str) -> np.ndarray:
        """Float view of a numeric column, masked cells as NaN."""
        if not self.is_numeric(name):
            raise NonNumericColumn(name, "column is not numeric")
        return self._data[name].to_numpy(dtype=float)

    def raw(self, name: str) -> pd.Series:
        self._col_index(name)
        return self._data[name]

    def is_masked(self, name: str) -> np.ndarray:
        return self._mask[:, self._col_index(name)].copy()

    def masked_count(self, name: str) -> int:
        return int(self._mask[:, self._col_index(name)].sum())

    @property
    def row_keys(self) -> list[tuple]:
        present = [k for k in KEY_COLUMNS if k in self._data.columns]
        if not present:
            return [(i,) for i in range(len(self))]
        cols = [self._data[k].tolist() for k in present]
        return [tuple(None if pd.isna(v) else int(v) for v in row) for row in zip(*cols)]

    # ---- derivation ----
    def select(self, columns: Sequence[str]) -> "PatientFrame":
        idx = [self._col_index(c) for c in columns]
        return PatientFrame(self._data.iloc[:, idx], self._mask[:, idx])

    def drop(self, columns: Iterable[str]) -> "PatientFrame":
        drop = set(columns)
        return self.select([c for c in self.columns if c not in drop])

    def take(self, rows) -> "PatientFrame":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return PatientFrame(self._data.iloc[rows], self._mask[rows])

    def sort_by(self, columns: Sequence[str]) -> "PatientFrame":
        for c in columns:
            self._col_index(c)
        order = self._data.sort_values(list(columns), kind="mergesort", na_position="last").index.to_numpy()
        return self.take(order)

    def rename(self, mapping: Mapping[str, str]) -> "PatientFrame":
        return PatientFrame(self._data.rename(columns=dict(mapping)), self._mask)

    def with_column(self, name: str, values, mask=None) -> "PatientFrame":
        """Add or replace a column; NaN/None become masked unless a mask is given."""
        series = pd.Series(values).reset_index(drop=True)
        if len(series) != len(self):
            raise ValueError(f"column {name} has {len(series)} rows, frame has {len(self)}")
        col_mask = series.isna().to_numpy() if mask is None else np.asarray(mask, dtype=bool)
        data = self._data.copy()
        if name in data.columns:
            pos = data.columns.get_loc(name)
            data[name] = series.to_numpy()
            new_mask = self._mask.copy()
            new_mask[:, pos] = col_mask
        else:
            data[name] = series.to_numpy()
            new_mask = np.column_stack([self._mask.reshape(len(self), self.shape[1]), col_mask])
        return PatientFrame(data, new_mask)

    def to_dataframe(self) -> pd.DataFrame:
        return self._data.copy()

    def equals(self, other: "PatientFrame", rtol: float = 0.0) -> bool:
        if self.columns != other.columns or self.shape != other.shape:
            return False
        if not np.array_equal(self._mask, other._mask):
            return False
        for name in self.columns:
            a, b = self._data[name], other._data[name]
            if pd.api.types.is_numeric_dtype(a) and pd.api.types.is_numeric_dtype(b):
                if not np.allclose(a.to_numpy(float), b.to_numpy(float), rtol=rtol, atol=0.0, equal_nan=True):
                    return False
            elif not a.fillna("").astype(str).equals(b.fillna("").astype(str)):
                return False
        return True


@dataclass(frozen=True)
class JoinSpec:
    keys: tuple[str, ...]
    kind: str = "inner"

    def __post_init__(self):
        keys = (self.keys,) if isinstance(self.keys, str) else tuple(self.keys)
        object.__setattr__(self, "keys", keys)
        if not keys:
            raise ValueError("join keys must be non-empty")
        unknown = [k for k in keys if k not in KEY_COLUMNS]
        if unknown:
            raise ValueError(f"join keys must be drawn from {KEY_COLUMNS}, got {unknown}")
        if self.kind not in ("inner", "left"):
            raise ValueError(f"join kind must be inner or left, got {self.kind}")


def _parse_time(text: pd.Series) -> pd.Series:
    """Timestamps become float hours: numeric cells as-is, date strings since the epoch."""
    numeric = pd.to_numeric(text, errors="coerce")
    rest = numeric.isna() & text.notna()
    if rest.any():
        stamps = pd.to_datetime(text[rest], errors="coerce")
        numeric[rest] = (stamps - pd.Timestamp(0)) / pd.Timedelta(hours=1)
    return numeric.astype(float)


def read_csv(path, schema: Mapping[str, str]) -> PatientFrame:
    """
    Read a comma-separated UTF-8 file. `schema` maps column name to one of
    int | float | time | str. Blank or unparseable numeric cells are masked.
    """
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except FileNotFoundError as e:
        raise IoFailure(str(path), "file not found") from e
    except pd.errors.EmptyDataError:
        raw = pd.DataFrame()
    except (OSError, UnicodeDecodeError, pd.errors.ParserError) as e:
        raise IoFailure(str(path), str(e)) from e

    columns = {}
    for name, kind in schema.items():
        if name not in raw.columns:
            raise MissingColumn(name, f"not in header of {path}")
        text = raw[name].astype(str).str.strip()
        text = text.where(text != "")
        if kind in ("int", "float"):
            columns[name] = pd.to_numeric(text, errors="coerce")
        elif kind == "time":
            columns[name] = _parse_time(text)
        elif kind == "str":
            columns[name] = text.astype(object)
        else:
            raise ValueError(f"unknown column kind {kind!r} for {name}")
    return PatientFrame(pd.DataFrame(columns, index=raw.index))


def write_csv(frame: PatientFrame, path, float_format: str = "%.17g") -> None:
    """Masked cells are written blank; the default float format round-trips exactly."""
    with atomic_output(path) as tmp:
        frame.to_dataframe().to_csv(tmp, index=False, na_rep="", float_format=float_format,
                                    lineterminator="\n", encoding="utf-8")


def join(left: PatientFrame, right: PatientFrame, spec: JoinSpec) -> PatientFrame:
    keys = list(spec.keys)
    for k in keys:
        if k not in left or k not in right:
            raise KeyMissing(k, "join key absent from one side")

    lkeys = left.data[keys].astype(float)
    lkeys["__left_row"] = np.arange(len(left))
    rkeys = right.data[keys].astype(float)
    rkeys["__right_row"] = np.arange(len(right))
    rkeys = rkeys.dropna(subset=keys)

    merged = lkeys.merge(rkeys, on=keys, how=spec.kind, sort=False)
    left_rows = merged["__left_row"].to_numpy(dtype=int)
    right_rows = merged["__right_row"].to_numpy(dtype=float)
    matched = ~np.isnan(right_rows)
    right_idx = np.where(matched, right_rows, 0).astype(int)

    out = left.take(left_rows)
    data = out.to_dataframe()
    mask_parts = [out.mask]
    used = set(data.columns)
    for name in right.columns:
        if name in keys:
            continue
        target = name
        while target in used:
            target += COLLISION_SUFFIX
        used.add(target)
        if len(right):
            col = right.data[name].iloc[right_idx].reset_index(drop=True)
            col_mask = right.mask[right_idx, right.columns.index(name)] | ~matched
        else:
            col = pd.Series([np.nan] * len(data))
            col_mask = np.ones(len(data), dtype=bool)
        data[target] = col.to_numpy()
        mask_parts.append(col_mask.reshape(-1, 1))
    mask = np.hstack(mask_parts) if mask_parts else None
    return PatientFrame(data, mask)


def aggregate_by_key(frame: PatientFrame, key, stats: Sequence[str] = ("mean", "min", "max"),
                     columns: Sequence[str] | None = None) -> PatientFrame:
    """One row per key value, sorted by key; masked cells never enter a statistic."""
    keys = [key] if isinstance(key, str) else list(key)
    for k in keys:
        if k not in frame:
            raise MissingColumn(k, "aggregation key not in frame")
    if columns is None:
        columns = [c for c in frame.columns if c not in keys]
    for c in columns:
        if not frame.is_numeric(c):
            raise NonNumericColumn(c, "cannot aggregate a non-numeric column")
    for s in stats:
        if s not in ("mean", "min", "max"):
            raise ValueError(f"unsupported statistic {s}")

    df = frame.data[keys + list(columns)].dropna(subset=keys)
    if df.empty:
        empty = {k: pd.Series(dtype=float) for k in keys}
        empty.update({f"{c}_{s}": pd.Series(dtype=float) for c in columns for s in stats})
        return PatientFrame(pd.DataFrame(empty))
    grouped = df.groupby(keys, sort=True)[list(columns)].agg(list(stats))
    grouped.columns = [f"{c}_{s}" for c, s in grouped.columns]
    out = grouped.reset_index()
    for k in keys:
        if np.all(np.mod(out[k].to_numpy(dtype=float), 1) == 0):
            out[k] = out[k].astype("int64")
    return PatientFrame(out)
