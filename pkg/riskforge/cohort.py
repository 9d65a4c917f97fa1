"""
Cohort construction: cardiac-arrest diagnosis filter, first ICU stay per
patient, adult filter and in-hospital mortality label.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import pandas as pd

from riskforge.lib.errors import EmptyCohort, MissingColumn, MissingDischtime, MissingIntime
from riskforge.lib.logger import log_info, log_warning
from riskforge.lib.tabular import JoinSpec, PatientFrame, join

MODULE = "cohort"

# === Input schemas (MIMIC-shaped headers) ===
DIAGNOSES_SCHEMA = {"subject_id": "int", "hadm_id": "int", "icd_code": "str", "icd_version": "int"}
PATIENTS_SCHEMA = {"subject_id": "int", "anchor_age": "int"}
ICUSTAYS_SCHEMA = {"subject_id": "int", "hadm_id": "int", "stay_id": "int", "intime": "time", "outtime": "time"}
ADMISSIONS_SCHEMA = {"subject_id": "int", "hadm_id": "int", "admittime": "time", "dischtime": "time",
                     "deathtime": "time"}

# ICD-9 427.5 and the ICD-10 I46 family
DEFAULT_ICD_CODES = ("4275", "I46", "I462", "I468", "I469")
DEFAULT_MIN_AGE = 18

COHORT_COLUMNS = ["subject_id", "hadm_id", "stay_id", "anchor_age", "intime", "dischtime", "deathtime",
                  "in_hospital_death"]


@dataclass(frozen=True)
class CohortConfig:
    icd_codes: tuple[str, ...] = DEFAULT_ICD_CODES
    min_age: int = DEFAULT_MIN_AGE
    code_column: str = "icd_code"
    age_column: str = "anchor_age"

    def __post_init__(self):
        codes = tuple(normalize_code(c) for c in self.icd_codes if str(c).strip())
        if not codes:
            raise ValueError("icd_codes must be non-empty")
        if self.min_age < 0:
            raise ValueError("min_age must be >= 0")
        object.__setattr__(self, "icd_codes", codes)


class CohortResult(NamedTuple):
    frame: PatientFrame
    flow: pd.DataFrame


def normalize_code(code) -> str:
    return str(code).strip().upper().replace(".", "")


def code_matches(code: str, pattern: str) -> bool:
    """
    `I46*` and bare ICD-10 stems (letter first, at most 3 characters) match by
    prefix; everything else, including 4-5 digit ICD-9 codes, must match exactly.
    """
    code = normalize_code(code)
    if pattern.endswith("*"):
        return code.startswith(pattern[:-1])
    if pattern[:1].isalpha() and len(pattern) <= 3:
        return code.startswith(pattern)
    return code == pattern


def filter_by_diagnosis(diagnoses: PatientFrame, cfg: CohortConfig, strict: bool = False) -> PatientFrame:
    if cfg.code_column not in diagnoses:
        raise MissingColumn(cfg.code_column, "diagnosis code column not in frame")
    codes = diagnoses.raw(cfg.code_column)
    keep = np.array([isinstance(c, str) and any(code_matches(c, p) for p in cfg.icd_codes) for c in codes],
                    dtype=bool)
    matched = diagnoses.take(keep)
    if "hadm_id" in matched and len(matched):
        first = ~matched.data["hadm_id"].duplicated(keep="first").to_numpy()
        matched = matched.take(first)
    log_info(MODULE, f"diagnosis filter kept {len(matched)} admissions of {len(diagnoses)} diagnosis rows")
    if len(matched) == 0:
        if strict:
            raise EmptyCohort(cfg.code_column, f"no rows match {list(cfg.icd_codes)}")
        log_warning(MODULE, f"EmptyCohort: no diagnosis rows match {list(cfg.icd_codes)}")
    return matched


def first_icu_stay(stays: PatientFrame) -> PatientFrame:
    if "intime" not in stays:
        raise MissingIntime("intime", "stays frame has no intime column")
    masked = stays.is_masked("intime")
    if masked.any():
        raise MissingIntime("intime", f"{int(masked.sum())} stays have no intime")
    order_cols = ["subject_id", "intime"] + (["stay_id"] if "stay_id" in stays else [])
    ordered = stays.sort_by(order_cols)
    first = ~ordered.data["subject_id"].duplicated(keep="first").to_numpy()
    return ordered.take(first)


def label_mortality(admissions: PatientFrame) -> PatientFrame:
    if "dischtime" not in admissions:
        raise MissingDischtime("dischtime", "admissions frame has no dischtime column")
    if admissions.is_masked("dischtime").any():
        raise MissingDischtime("dischtime", f"{admissions.masked_count('dischtime')} admissions lack dischtime")
    disch = admissions.values("dischtime")
    if "deathtime" in admissions:
        death = admissions.values("deathtime")
        died = ~np.isnan(death) & (death <= disch)
    else:
        died = np.zeros(len(admissions), dtype=bool)
    return admissions.with_column("in_hospital_death", died.astype(int))


def apply_age_filter(frame: PatientFrame, cfg: CohortConfig) -> PatientFrame:
    ages = frame.values(cfg.age_column)
    # NaN compares False, so masked ages drop out
    with np.errstate(invalid="ignore"):
        keep = ages >= cfg.min_age
    dropped = len(frame) - int(keep.sum())
    if dropped:
        log_info(MODULE, f"age filter dropped {dropped} rows below {cfg.min_age} years or without age")
    return frame.take(keep)


def _restrict(frame: PatientFrame, column: str, allowed) -> PatientFrame:
    allowed = set(int(v) for v in allowed)
    vals = frame.values(column)
    keep = np.array([not np.isnan(v) and int(v) in allowed for v in vals], dtype=bool)
    return frame.take(keep)


def build_cohort(diagnoses: PatientFrame, patients: PatientFrame, stays: PatientFrame,
                 admissions: PatientFrame, cfg: CohortConfig, strict: bool = False) -> CohortResult:
    """One row per subject, sorted by subject_id, with the in_hospital_death label."""
    flow = [("diagnosis rows", len(diagnoses))]
    dx = filter_by_diagnosis(diagnoses, cfg, strict=strict)
    flow.append(("cardiac arrest admissions", len(dx)))
    hadm_ids = dx.values("hadm_id")[~dx.is_masked("hadm_id")]

    ca_stays = _restrict(stays, "hadm_id", hadm_ids)
    flow.append(("icu stays", len(ca_stays)))
    first = first_icu_stay(ca_stays).select(["subject_id", "hadm_id", "stay_id", "intime"])
    flow.append(("first icu stays", len(first)))

    labelled = label_mortality(_restrict(admissions, "hadm_id", hadm_ids))
    deathtime = ["deathtime"] if "deathtime" in labelled else []
    labelled = labelled.select(["hadm_id", "dischtime"] + deathtime + ["in_hospital_death"])
    merged = join(first, labelled, JoinSpec(("hadm_id",), "inner"))
    merged = join(merged, patients.select(["subject_id", cfg.age_column]), JoinSpec(("subject_id",), "left"))
    if "deathtime" not in merged:
        merged = merged.with_column("deathtime", np.full(len(merged), np.nan))

    adults = apply_age_filter(merged, cfg)
    flow.append(("adults", len(adults)))
    if cfg.age_column != "anchor_age":
        adults = adults.rename({cfg.age_column: "anchor_age"})
    cohort = adults.select(COHORT_COLUMNS).sort_by(["subject_id"])
    deaths = int(cohort.values("in_hospital_death").sum()) if len(cohort) else 0
    flow.append(("in-hospital deaths", deaths))
    if len(cohort):
        log_info(MODULE, f"cohort: {len(cohort)} patients, {deaths} deaths ({100.0 * deaths / len(cohort):.1f}%)")
    return CohortResult(cohort, pd.DataFrame(flow, columns=["step", "count"]))
