"""
Structured feature harmonization over the first 24 ICU hours: vitals, labs,
GCS components, comorbidity flags and treatment flags, one row per stay.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd

from riskforge.lib.errors import ComponentOutOfRange, MissingColumn
from riskforge.lib.logger import log_info, log_warning
from riskforge.lib.tabular import JoinSpec, PatientFrame, aggregate_by_key, join

MODULE = "harmonization"

WINDOW_HOURS = 24.0
CELSIUS_GUESS_BELOW = 50.0

# === Input schemas ===
CHARTEVENTS_SCHEMA = {"subject_id": "int", "hadm_id": "int", "stay_id": "int", "charttime": "time",
                      "itemid": "int", "valuenum": "float", "valueuom": "str"}
LABEVENTS_SCHEMA = {"subject_id": "int", "hadm_id": "int", "charttime": "time", "itemid": "int",
                    "valuenum": "float", "valueuom": "str"}
PROCEDUREEVENTS_SCHEMA = {"subject_id": "int", "hadm_id": "int", "stay_id": "int", "starttime": "time",
                          "itemid": "int"}
INPUTEVENTS_SCHEMA = PROCEDUREEVENTS_SCHEMA

# === Variable panels ===
VITALS = ["HR", "SBP", "DBP", "MBP", "RR", "BT", "SpO2"]
LABS = ["Hematocrit", "Hemoglobin", "Platelets", "WBC", "PT", "INR", "Creatinine", "BUN", "Glucose",
        "Potassium", "Sodium", "Calcium", "Chloride", "AnionGap", "Bicarbonate", "Lactate", "pH"]
GCS_COMPONENTS = ["GCS_Eye", "GCS_Verbal", "GCS_Motor"]
BASE_VARIABLES = VITALS + LABS + ["GCS_Total"]
AGGREGATES = ("mean", "min", "max")

# MIMIC-IV itemids; arterial and non-invasive pressures share one variable
VITAL_ITEMS = {
    220045: "HR",
    220050: "SBP", 220179: "SBP",
    220051: "DBP", 220180: "DBP",
    220052: "MBP", 220181: "MBP",
    220210: "RR",
    223761: "BT", 223762: "BT",
    220277: "SpO2",
    220739: "GCS_Eye", 223900: "GCS_Verbal", 223901: "GCS_Motor",
}
CELSIUS_ITEMS = {223762}
FAHRENHEIT_ITEMS = {223761}

LAB_ITEMS = {
    51221: "Hematocrit", 51222: "Hemoglobin", 51265: "Platelets", 51301: "WBC", 51274: "PT", 51237: "INR",
    50912: "Creatinine", 51006: "BUN", 50931: "Glucose", 50971: "Potassium", 50983: "Sodium",
    50893: "Calcium", 50902: "Chloride", 50868: "AnionGap", 50882: "Bicarbonate", 50813: "Lactate",
    50820: "pH",
}

COMORBIDITY_CODES = {
    "hypertension": ("401", "402", "403", "404", "405", "I10", "I11", "I12", "I13", "I15", "I16"),
    "heart_failure": ("428", "I50"),
    "myocardial_infarction": ("410", "412", "I21", "I22", "I252"),
    "diabetes": ("250", "E08", "E09", "E10", "E11", "E13"),
    "copd": ("490", "491", "492", "496", "J41", "J42", "J43", "J44"),
}
TREATMENT_ITEMS = {
    "received_ventilation": (225792, 225794),
    "epinephrine": (221289,),
    "dopamine": (221662,),
}
FLAG_COLUMNS = list(COMORBIDITY_CODES) + list(TREATMENT_ITEMS)

# interval notation, closed unless stated; BT is checked in Fahrenheit
DEFAULT_PLAUSIBILITY = {
    "HR": "[20, 300] bpm",
    "SBP": "[40, 300] mmHg",
    "DBP": "[20, 200] mmHg",
    "MBP": "[30, 250] mmHg",
    "RR": "[4, 60] /min",
    "BT": "[77, 113] F",
    "SpO2": "[50, 100] %",
    "Hematocrit": "[10, 70] %",
    "Hemoglobin": "[3, 25] g/dL",
    "Platelets": "[5, 2000] K/uL",
    "WBC": "[1, 50] K/uL",
    "PT": "[5, 150] sec",
    "INR": "[0.5, 20] ratio",
    "Creatinine": "(0, 25] mg/dL",
    "BUN": "(0, 300] mg/dL",
    "Glucose": "(0, 600] mg/dL",
    "Potassium": "[1.5, 10] mEq/L",
    "Sodium": "[100, 200] mEq/L",
    "Calcium": "[3, 20] mg/dL",
    "Chloride": "[60, 160] mEq/L",
    "AnionGap": "[0, 60] mEq/L",
    "Bicarbonate": "[2, 60] mEq/L",
    "Lactate": "(0, 20] mmol/L",
    "pH": "[6.5, 8.0] units",
    "GCS_Eye": "[1, 4] points",
    "GCS_Verbal": "[1, 5] points",
    "GCS_Motor": "[1, 6] points",
}

_RULE_PATTERN = re.compile(r"^\s*([\[(])\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*([\])])\s*(.*)$")


@dataclass(frozen=True)
class PlausibilityRule:
    variable: str
    lower: float
    upper: float
    unit: str = ""
    lower_open: bool = False
    upper_open: bool = False

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"{self.variable}: lower {self.lower} must be below upper {self.upper}")

    def contains(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        with np.errstate(invalid="ignore"):
            lo = values > self.lower if self.lower_open else values >= self.lower
            hi = values < self.upper if self.upper_open else values <= self.upper
        return lo & hi

    def text(self) -> str:
        left = "(" if self.lower_open else "["
        right = ")" if self.upper_open else "]"
        return f"{left}{self.lower:g}, {self.upper:g}{right} {self.unit}".rstrip()


def parse_rule(variable: str, text: str) -> PlausibilityRule:
    m = _RULE_PATTERN.match(text)
    if not m:
        raise ValueError(f"{variable}: cannot parse plausibility interval {text!r}")
    left, lower, upper, right, unit = m.groups()
    return PlausibilityRule(variable, float(lower), float(upper), unit.strip(),
                            lower_open=left == "(", upper_open=right == ")")


def default_rules() -> list[PlausibilityRule]:
    return [parse_rule(v, t) for v, t in DEFAULT_PLAUSIBILITY.items()]


class PlausibilityResult(NamedTuple):
    frame: PatientFrame
    removed: dict


class HarmonizedResult(NamedTuple):
    frame: PatientFrame
    removed: pd.DataFrame
    unlinked: dict


# === Unit handling ===
def convert_temperature(value, unit):
    """Celsius to Fahrenheit; a blank unit with a value below 50 is read as Celsius."""
    value = np.asarray(value, dtype=float)
    if unit in ("C", "c", "°C", "Deg. C"):
        out = value * 9.0 / 5.0 + 32.0
    elif unit in ("F", "f", "°F", "Deg. F"):
        out = value
    elif unit is None or unit == "":
        out = np.where(value < CELSIUS_GUESS_BELOW, value * 9.0 / 5.0 + 32.0, value)
    else:
        raise ValueError(f"unknown temperature unit {unit!r}")
    return float(out) if out.ndim == 0 else out


def fahrenheit_to_celsius(value):
    value = np.asarray(value, dtype=float)
    out = (value - 32.0) * 5.0 / 9.0
    return float(out) if out.ndim == 0 else out


def mean_bp(sbp, dbp):
    return (np.asarray(sbp, dtype=float) + 2.0 * np.asarray(dbp, dtype=float)) / 3.0


def _temperature_unit(itemid: int, uom) -> str | None:
    if itemid in CELSIUS_ITEMS:
        return "C"
    if itemid in FAHRENHEIT_ITEMS:
        return "F"
    if isinstance(uom, str) and uom.strip():
        return "C" if "C" in uom.upper() else "F"
    return None


# === Windowing ===
def window_24h(events: PatientFrame, stays: PatientFrame, time_column: str = "charttime",
               hours: float = WINDOW_HOURS) -> PatientFrame:
    """Keep events with intime <= t < intime + hours; events that match no stay are counted and dropped."""
    key = "stay_id" if "stay_id" in events else "hadm_id"
    if time_column not in events:
        raise MissingColumn(time_column, "event frame has no timestamp column")
    stay_cols = [key, "intime"] if key == "stay_id" else [key, "stay_id", "intime"]
    linked = join(events, stays.select(stay_cols), JoinSpec((key,), "left"))
    unlinked = linked.is_masked("intime")
    if unlinked.any():
        log_warning(MODULE, f"UnlinkedEvent: {int(unlinked.sum())} of {len(events)} rows match no cohort stay")
    t = linked.values(time_column)
    start = linked.values("intime")
    with np.errstate(invalid="ignore"):
        keep = ~unlinked & (t >= start) & (t < start + hours)
    return linked.take(keep).drop(["intime"])


def count_unlinked(events: PatientFrame, stays: PatientFrame) -> int:
    key = "stay_id" if "stay_id" in events else "hadm_id"
    known = set(stays.data[key].dropna().astype(int))
    keys = events.data[key]
    return int(sum(1 for k in keys if pd.isna(k) or int(k) not in known))


# === Cleaning ===
def apply_plausibility(frame: PatientFrame, rules: Sequence[PlausibilityRule]) -> PlausibilityResult:
    """Out-of-range cells are masked in place; rows are never dropped."""
    out = frame
    removed = {}
    for rule in rules:
        if rule.variable not in out:
            raise MissingColumn(rule.variable, "plausibility rule names an absent column")
        values = out.values(rule.variable)
        observed = ~out.is_masked(rule.variable)
        bad = observed & ~rule.contains(values)
        removed[rule.variable] = int(bad.sum())
        if bad.any():
            out = out.with_column(rule.variable, np.where(bad, np.nan, values), mask=~observed | bad)
    total = sum(removed.values())
    if total:
        log_info(MODULE, f"plausibility masked {total} cells: "
                 + ", ".join(f"{k}={v}" for k, v in removed.items() if v))
    return PlausibilityResult(out, removed)


def gcs_total(eye, verbal, motor):
    """Sum of the component means; each must be present and inside its scale."""
    parts = {"GCS_Eye": (eye, 4.0), "GCS_Verbal": (verbal, 5.0), "GCS_Motor": (motor, 6.0)}
    arrays = {}
    for name, (value, top) in parts.items():
        arr = np.asarray(value, dtype=float)
        if np.isnan(arr).any():
            raise ComponentOutOfRange(name, "component missing")
        if (arr < 1.0).any() or (arr > top).any():
            raise ComponentOutOfRange(name, f"outside [1, {top:g}]")
        arrays[name] = arr
    total = arrays["GCS_Eye"] + arrays["GCS_Verbal"] + arrays["GCS_Motor"]
    return float(total) if total.ndim == 0 else total


def add_gcs_total(frame: PatientFrame) -> PatientFrame:
    total = gcs_total(frame.values("GCS_Eye"), frame.values("GCS_Verbal"), frame.values("GCS_Motor"))
    return frame.with_column("GCS_Total", total)


# === Pivot + aggregation ===
def _long_readings(events: PatientFrame, item_map: Mapping[int, str]) -> pd.DataFrame:
    """One row per mapped reading: stay_id, charttime, variable, value (temperatures in Fahrenheit)."""
    df = events.data
    df = df[df["itemid"].isin(list(item_map)) & df["valuenum"].notna() & df["stay_id"].notna()]
    values = df["valuenum"].to_numpy(dtype=float).copy()
    variable = df["itemid"].map(item_map).to_numpy()
    if len(df) and "BT" in item_map.values():
        uoms = df["valueuom"] if "valueuom" in df else pd.Series([None] * len(df), index=df.index)
        for i in np.flatnonzero(variable == "BT"):
            unit = _temperature_unit(int(df["itemid"].iloc[i]), uoms.iloc[i])
            values[i] = convert_temperature(values[i], unit)
    return pd.DataFrame({
        "stay_id": df["stay_id"].to_numpy(dtype="int64"),
        "charttime": df["charttime"].to_numpy(dtype=float),
        "variable": variable,
        "value": values,
    })


def screen_readings(long: pd.DataFrame, rules: Sequence[PlausibilityRule]) -> tuple[pd.DataFrame, dict]:
    """
    Drops implausible single readings. Runs before readings that share a
    timestamp (arterial and cuff pressures) are averaged.
    """
    keep = np.ones(len(long), dtype=bool)
    removed = {}
    for rule in rules:
        mine = (long["variable"] == rule.variable).to_numpy()
        bad = mine & ~rule.contains(long["value"].to_numpy(dtype=float))
        removed[rule.variable] = int(bad.sum())
        keep &= ~bad
    total = sum(removed.values())
    if total:
        log_info(MODULE, f"plausibility dropped {total} readings: "
                 + ", ".join(f"{k}={v}" for k, v in removed.items() if v))
    return long[keep], removed


def _pivot(long: pd.DataFrame, variables: Sequence[str]) -> PatientFrame:
    if long.empty:
        empty = pd.DataFrame({"stay_id": pd.Series(dtype="int64"), "charttime": pd.Series(dtype=float)})
        for v in variables:
            empty[v] = pd.Series(dtype=float)
        return PatientFrame(empty)
    wide = long.pivot_table(index=["stay_id", "charttime"], columns="variable", values="value",
                            aggfunc="mean", sort=True)
    wide = wide.reindex(columns=list(variables))
    wide.columns.name = None
    return PatientFrame(wide.reset_index())


def pivot_measurements(events: PatientFrame, item_map: Mapping[int, str],
                       rules: Sequence[PlausibilityRule] = ()) -> PatientFrame:
    """
    One row per (stay_id, charttime), one column per mapped variable; repeated
    readings are averaged after `rules` have screened each one.
    """
    long = _long_readings(events, item_map)
    if rules:
        long, _ = screen_readings(long, rules)
    return _pivot(long, list(dict.fromkeys(item_map.values())))


def _derive_mbp(wide: PatientFrame) -> PatientFrame:
    mbp = wide.values("MBP")
    derived = mean_bp(wide.values("SBP"), wide.values("DBP"))
    use = np.isnan(mbp) & ~np.isnan(derived)
    if not use.any():
        return wide
    log_info(MODULE, f"MBP derived from SBP/DBP at {int(use.sum())} timestamps")
    return wide.with_column("MBP", np.where(use, derived, mbp))


def _aggregate(wide: PatientFrame, full: Sequence[str], mean_only: Sequence[str]) -> PatientFrame:
    agg = aggregate_by_key(wide, "stay_id", AGGREGATES, columns=list(full))
    if mean_only:
        means = aggregate_by_key(wide, "stay_id", ("mean",), columns=list(mean_only))
        agg = join(agg, means, JoinSpec(("stay_id",), "left"))
    return agg


def harmonize_vitals(chartevents: PatientFrame, rules: Sequence[PlausibilityRule]) -> tuple[PatientFrame, dict]:
    vital_rules = [r for r in rules if r.variable in VITALS or r.variable in GCS_COMPONENTS]
    long, removed = screen_readings(_long_readings(chartevents, VITAL_ITEMS), vital_rules)
    wide = _derive_mbp(_pivot(long, list(dict.fromkeys(VITAL_ITEMS.values()))))
    wide, again = apply_plausibility(wide, [r for r in vital_rules if r.variable == "MBP"])
    if "MBP" in again:
        removed["MBP"] = removed.get("MBP", 0) + again["MBP"]
    return _aggregate(wide, VITALS, GCS_COMPONENTS), removed


def harmonize_labs(labevents: PatientFrame, rules: Sequence[PlausibilityRule]) -> tuple[PatientFrame, dict]:
    long, removed = screen_readings(_long_readings(labevents, LAB_ITEMS), [r for r in rules if r.variable in LABS])
    return _aggregate(_pivot(long, list(dict.fromkeys(LAB_ITEMS.values()))), LABS, ()), removed


def binary_flags(diagnoses: PatientFrame, events: PatientFrame, stays: PatientFrame,
                 comorbidities: Mapping[str, Sequence[str]] = COMORBIDITY_CODES,
                 treatments: Mapping[str, Sequence[int]] = TREATMENT_ITEMS) -> PatientFrame:
    """
    One row per stay in `stays`. Comorbidities come from any diagnosis of the
    stay's admission; treatments from `events`, which the caller has already
    restricted to the 24-hour window.
    """
    stay_ids = stays.data["stay_id"].astype("int64").to_numpy()
    hadm_of_stay = dict(zip(stays.data["stay_id"].astype("int64"), stays.data["hadm_id"].astype("int64")))
    out = pd.DataFrame({"stay_id": stay_ids})

    dx = diagnoses.data.dropna(subset=["hadm_id"])
    codes_by_hadm = {}
    for hadm, code in zip(dx["hadm_id"].astype("int64"), dx["icd_code"]):
        if isinstance(code, str):
            codes_by_hadm.setdefault(int(hadm), []).append(code.strip().upper().replace(".", ""))
    for flag, prefixes in comorbidities.items():
        out[flag] = [int(any(c.startswith(tuple(prefixes)) for c in codes_by_hadm.get(int(hadm_of_stay[s]), ())))
                     for s in stay_ids]

    ev = events.data.dropna(subset=["stay_id", "itemid"])
    items_by_stay = {}
    for stay, item in zip(ev["stay_id"].astype("int64"), ev["itemid"].astype("int64")):
        items_by_stay.setdefault(int(stay), set()).add(int(item))
    for flag, items in treatments.items():
        wanted = set(int(i) for i in items)
        out[flag] = [int(bool(items_by_stay.get(int(s), set()) & wanted)) for s in stay_ids]
    return PatientFrame(out)


def build_structured(cohort: PatientFrame, chartevents: PatientFrame, labevents: PatientFrame,
                     diagnoses: PatientFrame, procedureevents: PatientFrame, inputevents: PatientFrame,
                     rules: Sequence[PlausibilityRule] | None = None) -> HarmonizedResult:
    """Per-stay structured frame: keys, age, label, vital/lab aggregates, GCS component means, flags."""
    rules = default_rules() if rules is None else list(rules)
    stays = cohort.select(["subject_id", "hadm_id", "stay_id", "intime"])

    unlinked = {
        "chartevents": count_unlinked(chartevents, stays),
        "labevents": count_unlinked(labevents, stays),
    }
    charts = window_24h(chartevents, stays, "charttime")
    labs = window_24h(labevents, stays, "charttime")
    log_info(MODULE, f"24h window: {len(charts)} chart rows, {len(labs)} lab rows")

    vital_agg, removed_v = harmonize_vitals(charts, rules)
    lab_agg, removed_l = harmonize_labs(labs, rules)

    treatments = [window_24h(f, stays, "starttime") for f in (procedureevents, inputevents)]
    events = PatientFrame(pd.concat([t.data[["stay_id", "itemid"]] for t in treatments], ignore_index=True))
    cohort_dx = diagnoses.take(np.isin(diagnoses.values("hadm_id"), cohort.values("hadm_id")))
    flags = binary_flags(cohort_dx, events, stays)

    base = cohort.select(["subject_id", "hadm_id", "stay_id", "anchor_age", "in_hospital_death"])
    frame = join(base, vital_agg, JoinSpec(("stay_id",), "left"))
    frame = join(frame, lab_agg, JoinSpec(("stay_id",), "left"))
    frame = join(frame, flags, JoinSpec(("stay_id",), "left"))

    removed = {**removed_v, **removed_l}
    rule_by_var = {r.variable: r for r in rules}
    report = pd.DataFrame([
        {"variable": v, "rule": rule_by_var[v].text(), "removed": n}
        for v, n in removed.items() if v in rule_by_var
    ], columns=["variable", "rule", "removed"])
    return HarmonizedResult(frame, report, unlinked)


def model_columns(frame: PatientFrame) -> PatientFrame:
    """
    Modeling view: `<var>_mean` renamed to the bare variable name, min/max
    aggregates dropped. GCS_Total is added later, after imputation.
    """
    keep = ["subject_id", "hadm_id", "stay_id", "anchor_age", "in_hospital_death"]
    rename = {}
    for v in VITALS + LABS + GCS_COMPONENTS:
        col = f"{v}_mean"
        if col in frame:
            keep.append(col)
            rename[col] = v
    keep += [f for f in FLAG_COLUMNS if f in frame]
    return frame.select(keep).rename(rename)
