"""
Seeded synthetic cohort with known ground truth.

Emits MIMIC-shaped raw tables (diagnoses, patients, ICU stays, admissions,
chart/lab/procedure/input events, notes, note embeddings) whose outcome is
drawn from a known logistic model over the stay-level variables plus a
latent text signal.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit

from riskforge.harmonization import GCS_COMPONENTS, LAB_ITEMS, LABS, TREATMENT_ITEMS, VITALS
from riskforge.lib.artifacts import write_table
from riskforge.lib.errors import InfeasiblePrevalence
from riskforge.lib.logger import log_debug, log_info
from riskforge.scoring_eval import roc
from riskforge.text_features import STOPWORDS

MODULE = "synth"

# ===== Identifiers =====
SUBJECT_BASE = 10_000_000
HADM_BASE = 20_000_000
STAY_BASE = 30_000_000
SECOND_STAY_BASE = 40_000_000

# ===== Effects (per standard deviation of the stay-level value) =====
DEFAULT_BETA = MappingProxyType({
    "anchor_age": 0.4, "Lactate": 0.6, "HR": 0.45, "BUN": 0.35, "GCS_Total": -0.6,
    "BT": -0.35, "SpO2": -0.3, "Hemoglobin": -0.3,
})
DEFAULT_MISSING = MappingProxyType({"BT": 0.133, "Lactate": 0.19, "pH": 0.176, "GCS": 0.02})
BASE_MISSING_RATE = 0.05
NOTE_COVERAGE = MappingProxyType({"discharge": 0.70, "radiology": 0.71})
VENTILATION_RATE = 0.597
INTERCEPT_BRACKET = 30.0

# stay-level distribution of each variable in recording units (BT in Celsius)
VARIABLE_SCALE = {
    "HR": (95.0, 20.0, 30.0, 200.0), "SBP": (115.0, 22.0, 60.0, 220.0), "DBP": (60.0, 12.0, 30.0, 120.0),
    "RR": (20.0, 5.0, 6.0, 50.0), "BT": (36.8, 0.9, 33.0, 41.0), "SpO2": (96.0, 3.0, 70.0, 99.5),
    "Hemoglobin": (11.0, 2.0, 5.0, 18.0), "Platelets": (200.0, 80.0, 20.0, 600.0), "WBC": (12.0, 5.0, 1.5, 45.0),
    "PT": (15.0, 4.0, 9.0, 60.0), "Creatinine": (1.5, 0.8, 0.3, 10.0), "BUN": (30.0, 15.0, 4.0, 150.0),
    "Glucose": (160.0, 60.0, 40.0, 550.0), "Potassium": (4.3, 0.7, 2.5, 7.5), "Sodium": (138.0, 5.0, 120.0, 160.0),
    "Calcium": (8.4, 0.8, 5.5, 12.0), "Chloride": (104.0, 6.0, 85.0, 125.0), "AnionGap": (16.0, 5.0, 4.0, 40.0),
    "Bicarbonate": (21.0, 5.0, 6.0, 40.0), "Lactate": (3.5, 2.5, 0.4, 18.0), "pH": (7.30, 0.10, 6.8, 7.7),
}
AGE_SCALE = (65.0, 15.0, 18.0, 95.0)
READING_SPREAD = 0.05

VITAL_ITEM = {"HR": 220045, "SBP": 220179, "DBP": 220180, "MBP": 220181, "RR": 220210, "BT": 223762,
              "SpO2": 220277, "GCS_Eye": 220739, "GCS_Verbal": 223900, "GCS_Motor": 223901}
LAB_ITEM = {name: item for item, name in LAB_ITEMS.items()}
VITAL_UNIT = {"HR": "bpm", "SBP": "mmHg", "DBP": "mmHg", "MBP": "mmHg", "RR": "insp/min", "BT": "°C",
              "SpO2": "%", "GCS_Eye": "", "GCS_Verbal": "", "GCS_Motor": ""}

COMORBIDITY_SAMPLES = {"hypertension": ("I10", 0.45), "heart_failure": ("I509", 0.30),
                       "myocardial_infarction": ("I214", 0.25), "diabetes": ("E119", 0.28),
                       "copd": ("J449", 0.12)}
PRESSOR_RATES = {"epinephrine": 0.20, "dopamine": 0.10}

# ===== Pseudo-notes =====
CONSONANTS = "bcdfghklmnprstvz"
VOWELS = "aeiou"
FILLER_VOCAB = 400
RISK_TERMS = ("anoxic", "hypoxic", "asystole", "withdrawal", "comfort")
RECOVERY_TERMS = ("extubated", "ambulating", "stable", "alert", "improving")
EMBEDDING_RANK = 5


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 2000
    prevalence: float = 0.52
    true_beta: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_BETA))
    text_signal_strength: float = 1.0
    missing_rates: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_MISSING))
    default_missing_rate: float = BASE_MISSING_RATE
    note_coverage: Mapping[str, float] = field(default_factory=lambda: dict(NOTE_COVERAGE))
    embedding_dim: int = 64
    distractors: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 10:
            raise ValueError("n_patients must be >= 10")
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must be in (0, 1)")
        rates = list(self.missing_rates.values()) + list(self.note_coverage.values()) + [self.default_missing_rate]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("missing rates and note coverage must be in [0, 1]")
        unknown = set(self.true_beta) - set(VARIABLE_SCALE) - {"anchor_age", "GCS_Total", "INR", "Hematocrit", "MBP"}
        if unknown:
            raise ValueError(f"true_beta names unknown variables {sorted(unknown)}")
        if self.embedding_dim < EMBEDDING_RANK:
            raise ValueError(f"embedding_dim must be >= {EMBEDDING_RANK}")


@dataclass(frozen=True)
class SynthTruth:
    intercept: float
    beta: Mapping[str, float]
    text_signal_strength: float
    informative: tuple[str, ...]
    bayes_auc: float
    prevalence: float
    linear_predictor: np.ndarray
    outcome: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        rows = [{"name": "intercept", "kind": "intercept", "value": self.intercept}]
        rows += [{"name": k, "kind": "beta", "value": v} for k, v in self.beta.items()]
        rows += [{"name": "text_signal_strength", "kind": "text", "value": self.text_signal_strength},
                 {"name": "bayes_auc", "kind": "summary", "value": self.bayes_auc},
                 {"name": "prevalence", "kind": "summary", "value": self.prevalence}]
        rows += [{"name": k, "kind": "informative", "value": 1.0} for k in self.informative]
        return pd.DataFrame(rows, columns=["name", "kind", "value"])


@dataclass(frozen=True)
class SynthResult:
    tables: Mapping[str, pd.DataFrame]
    truth: SynthTruth

    @property
    def ground_truth(self) -> pd.DataFrame:
        return self.truth.to_frame()


# === Stay-level values ===
def _clipped_normal(rng, n, scale):
    mean, sd, lo, hi = scale
    return np.clip(rng.normal(mean, sd, n), lo, hi)


def _stay_values(rng, n: int) -> dict:
    values = {name: _clipped_normal(rng, n, scale) for name, scale in VARIABLE_SCALE.items()}
    # collinear partners
    values["INR"] = np.clip(values["PT"] / 12.5 + rng.normal(0.0, 0.05, n), 0.6, 15.0)
    values["Hematocrit"] = np.clip(3.0 * values["Hemoglobin"] + rng.normal(0.0, 1.0, n), 12.0, 60.0)
    values["MBP"] = (values["SBP"] + 2.0 * values["DBP"]) / 3.0 + rng.normal(0.0, 1.5, n)
    values["anchor_age"] = np.round(_clipped_normal(rng, n, AGE_SCALE))

    latent = rng.normal(0.0, 1.0, n)
    values["GCS_Eye"] = np.clip(np.round(3.0 + 1.0 * latent + rng.normal(0.0, 0.3, n)), 1, 4)
    values["GCS_Verbal"] = np.clip(np.round(4.0 + 1.3 * latent + rng.normal(0.0, 0.3, n)), 1, 5)
    values["GCS_Motor"] = np.clip(np.round(5.0 + 1.2 * latent + rng.normal(0.0, 0.3, n)), 1, 6)
    values["GCS_Total"] = values["GCS_Eye"] + values["GCS_Verbal"] + values["GCS_Motor"]
    return values


def _standardized(values: np.ndarray) -> np.ndarray:
    sd = values.std()
    return (values - values.mean()) / sd if sd > 0 else np.zeros_like(values)


def solve_intercept(partial_lp: np.ndarray, prevalence: float) -> float:
    """Intercept b0 with mean(sigmoid(b0 + lp)) equal to `prevalence`."""
    def gap(b0):
        return float(np.mean(expit(b0 + partial_lp))) - prevalence

    lo, hi = -INTERCEPT_BRACKET, INTERCEPT_BRACKET
    if gap(lo) > 0 or gap(hi) < 0:
        raise InfeasiblePrevalence("prevalence", f"{prevalence} not reachable with intercept in [{lo}, {hi}]")
    return float(brentq(gap, lo, hi, xtol=1e-12))


# === Pseudo-notes and embeddings ===
def filler_vocabulary() -> list[str]:
    words = [a + b + c for a in CONSONANTS for b in VOWELS for c in CONSONANTS]
    banned = STOPWORDS | set(RISK_TERMS) | set(RECOVERY_TERMS) | {"no", "not", "nor"}
    return [w for w in words if w not in banned][:FILLER_VOCAB]


def _note_text(rng, vocab, weights, signal: float) -> str:
    length = int(rng.integers(40, 90))
    tokens = list(rng.choice(vocab, size=length, p=weights))
    for term in RISK_TERMS:
        tokens += [term] * int(rng.poisson(1.5 * np.exp(0.8 * signal)))
    for term in RECOVERY_TERMS:
        tokens += [term] * int(rng.poisson(1.5 * np.exp(-0.8 * signal)))
    order = rng.permutation(len(tokens))
    text = " ".join(tokens[i] for i in order)
    return f"Name: ___ Unit No: ___ Day {int(rng.integers(1, 9))}. {text}."


def _embeddings(rng, signal: np.ndarray, dim: int) -> np.ndarray:
    n = len(signal)
    factors = np.column_stack([signal] + [rng.normal(0.0, 1.0, n) for _ in range(EMBEDDING_RANK - 1)])
    scales = np.linspace(2.0, 0.8, EMBEDDING_RANK)
    loadings = rng.normal(0.0, 1.0, (EMBEDDING_RANK, dim)) / np.sqrt(dim)
    return (factors * scales) @ loadings * np.sqrt(dim) + rng.normal(0.0, 0.3, (n, dim))


# === Generation ===
def generate(cfg: SynthConfig = SynthConfig()) -> SynthResult:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_patients
    idx = np.arange(n)
    subject, hadm, stay = SUBJECT_BASE + idx, HADM_BASE + idx, STAY_BASE + idx
    values = _stay_values(rng, n)

    # ===== Outcome =====
    text_signal = rng.normal(0.0, 1.0, n)
    partial = np.zeros(n)
    for name, beta in cfg.true_beta.items():
        partial += beta * _standardized(values[name])
    partial += cfg.text_signal_strength * text_signal
    b0 = solve_intercept(partial, cfg.prevalence)
    lp = b0 + partial
    died = (rng.random(n) < expit(lp)).astype(int)
    log_info(MODULE, f"{n} patients, intercept {b0:.4f}, empirical prevalence {died.mean():.3f}")

    # ===== Stays and admissions =====
    intime = np.round(rng.uniform(1_000.0, 50_000.0, n), 2)
    admittime = intime - np.round(rng.uniform(0.5, 24.0, n), 2)
    dischtime = intime + np.round(rng.uniform(48.0, 400.0, n), 2)
    patients = pd.DataFrame({"subject_id": subject, "anchor_age": values["anchor_age"].astype(int)})
    stays = pd.DataFrame({"subject_id": subject, "hadm_id": hadm, "stay_id": stay, "intime": intime,
                          "outtime": intime + 72.0})
    admissions = pd.DataFrame({"subject_id": subject, "hadm_id": hadm, "admittime": admittime,
                               "dischtime": dischtime, "deathtime": np.where(died == 1, dischtime, np.nan)})

    dx_rows = []
    for i in idx:
        if rng.random() < 0.5:
            dx_rows.append((subject[i], hadm[i], "I469", 10))
        else:
            dx_rows.append((subject[i], hadm[i], "4275", 9))
        for code, rate in COMORBIDITY_SAMPLES.values():
            if rng.random() < rate:
                dx_rows.append((subject[i], hadm[i], code, 10))

    # ===== Missingness (MCAR, whole variable per stay) =====
    observed = {}
    for name in VITALS + LABS:
        rate = cfg.missing_rates.get(name, cfg.default_missing_rate)
        observed[name] = rng.random(n) >= rate
    gcs_seen = rng.random(n) >= cfg.missing_rates.get("GCS", cfg.default_missing_rate)
    for name in GCS_COMPONENTS:
        observed[name] = gcs_seen

    # ===== Events: two readings per variable, symmetric about the stay value =====
    chart_rows, lab_rows = [], []
    for name in VITALS + GCS_COMPONENTS:
        keep = observed[name]
        spread = READING_SPREAD * VARIABLE_SCALE.get(name, (0.0, 0.0))[1]
        for sign, offset in ((-1.0, 2.0), (1.0, 9.0)):
            vals = values[name][keep] + sign * spread
            chart_rows.append(pd.DataFrame({
                "subject_id": subject[keep], "hadm_id": hadm[keep], "stay_id": stay[keep],
                "charttime": intime[keep] + offset, "itemid": VITAL_ITEM[name], "valuenum": np.round(vals, 6),
                "valueuom": VITAL_UNIT[name]}))
    for name in LABS:
        keep = observed[name]
        spread = READING_SPREAD * VARIABLE_SCALE.get(name, (0.0, 0.1))[1]
        for sign, offset in ((-1.0, 3.0), (1.0, 15.0)):
            lab_rows.append(pd.DataFrame({
                "subject_id": subject[keep], "hadm_id": hadm[keep], "charttime": intime[keep] + offset,
                "itemid": LAB_ITEM[name], "valuenum": np.round(values[name][keep] + sign * spread, 6),
                "valueuom": ""}))

    proc_rows, input_rows = [], []
    vent = rng.random(n) < VENTILATION_RATE
    proc_rows.append(pd.DataFrame({"subject_id": subject[vent], "hadm_id": hadm[vent], "stay_id": stay[vent],
                                   "starttime": intime[vent] + 1.0, "itemid": TREATMENT_ITEMS["received_ventilation"][0]}))
    for flag, rate in PRESSOR_RATES.items():
        given = rng.random(n) < rate
        input_rows.append(pd.DataFrame({"subject_id": subject[given], "hadm_id": hadm[given],
                                        "stay_id": stay[given], "starttime": intime[given] + 4.0,
                                        "itemid": TREATMENT_ITEMS[flag][0]}))

    # ===== Notes and embeddings =====
    vocab = filler_vocabulary()
    weights = 1.0 / np.arange(1, len(vocab) + 1)
    weights /= weights.sum()
    notes, embeddings = {}, {}
    for kind in ("discharge", "radiology"):
        covered = rng.random(n) < cfg.note_coverage.get(kind, 0.0)
        rows = []
        for i in np.flatnonzero(covered):
            count = 1 if kind == "discharge" else int(rng.integers(1, 4))
            for _ in range(count):
                t = dischtime[i] if kind == "discharge" else intime[i] + round(float(rng.uniform(0.0, 48.0)), 2)
                rows.append((hadm[i], t, _note_text(rng, vocab, weights, text_signal[i])))
        notes[kind] = pd.DataFrame(rows, columns=["hadm_id", "charttime", "text"])
        emb = _embeddings(rng, text_signal[covered], cfg.embedding_dim)
        frame = pd.DataFrame(emb, columns=[f"e{j}" for j in range(cfg.embedding_dim)])
        frame.insert(0, "hadm_id", hadm[covered])
        embeddings[kind] = frame
        log_debug(MODULE, f"{kind}: {int(covered.sum())} admissions with a note, {len(rows)} notes")

    chartevents = pd.concat(chart_rows, ignore_index=True)
    labevents = pd.concat(lab_rows, ignore_index=True)
    procedureevents = pd.concat(proc_rows, ignore_index=True)
    inputevents = pd.concat(input_rows, ignore_index=True)
    diagnoses = pd.DataFrame(dx_rows, columns=["subject_id", "hadm_id", "icd_code", "icd_version"])

    tables = {"diagnoses_icd": diagnoses, "patients": patients, "icustays": stays, "admissions": admissions,
              "chartevents": chartevents, "labevents": labevents, "procedureevents": procedureevents,
              "inputevents": inputevents, "discharge": notes["discharge"], "radiology": notes["radiology"],
              "discharge_emb": embeddings["discharge"], "radiology_emb": embeddings["radiology"]}
    if cfg.distractors:
        tables = _add_distractors(rng, tables, n, intime)
    tables = {name: df.sort_values(_sort_keys(df), kind="mergesort").reset_index(drop=True)
              for name, df in tables.items()}

    beta = {k: float(v) for k, v in cfg.true_beta.items()}
    informative = tuple(k for k, v in beta.items() if v != 0.0)
    truth = SynthTruth(b0, beta, float(cfg.text_signal_strength), informative, roc(lp, died).auc,
                       float(died.mean()), lp, died)
    return SynthResult(tables, truth)


def _sort_keys(df: pd.DataFrame) -> list[str]:
    keys = [c for c in ("subject_id", "hadm_id", "stay_id", "charttime", "starttime", "itemid") if c in df.columns]
    return keys or [df.columns[0]]


def _add_distractors(rng, tables: dict, n: int, intime: np.ndarray) -> dict:
    """Rows the cohort and window filters must reject."""
    k = max(2, n // 20)
    extra = np.arange(n, n + 2 * k)
    subject, hadm, stay = SUBJECT_BASE + extra, HADM_BASE + extra, STAY_BASE + extra
    start = np.round(rng.uniform(1_000.0, 50_000.0, 2 * k), 2)
    # first k: non-arrest admissions; next k: minors with an arrest code
    codes = ["I10"] * k + ["I469"] * k
    ages = np.concatenate([rng.integers(30, 90, k), rng.integers(2, 17, k)])
    out = dict(tables)
    out["diagnoses_icd"] = pd.concat([tables["diagnoses_icd"], pd.DataFrame(
        {"subject_id": subject, "hadm_id": hadm, "icd_code": codes, "icd_version": 10})], ignore_index=True)
    out["patients"] = pd.concat([tables["patients"], pd.DataFrame({"subject_id": subject, "anchor_age": ages})],
                                ignore_index=True)
    out["admissions"] = pd.concat([tables["admissions"], pd.DataFrame(
        {"subject_id": subject, "hadm_id": hadm, "admittime": start - 2.0, "dischtime": start + 100.0,
         "deathtime": np.nan})], ignore_index=True)
    stays = pd.DataFrame({"subject_id": subject, "hadm_id": hadm, "stay_id": stay, "intime": start,
                          "outtime": start + 48.0})

    # later second ICU stays and duplicate arrest codes for some cohort admissions
    again = rng.choice(n, size=k, replace=False)
    second = pd.DataFrame({"subject_id": SUBJECT_BASE + again, "hadm_id": HADM_BASE + again,
                           "stay_id": SECOND_STAY_BASE + again, "intime": intime[again] + 120.0,
                           "outtime": intime[again] + 160.0})
    out["icustays"] = pd.concat([tables["icustays"], stays, second], ignore_index=True)
    dup = pd.DataFrame({"subject_id": SUBJECT_BASE + again, "hadm_id": HADM_BASE + again,
                        "icd_code": "I462", "icd_version": 10})
    out["diagnoses_icd"] = pd.concat([out["diagnoses_icd"], dup], ignore_index=True)

    # out-of-window and implausible readings on cohort stays
    late = pd.DataFrame({"subject_id": SUBJECT_BASE + again, "hadm_id": HADM_BASE + again,
                         "stay_id": STAY_BASE + again, "charttime": intime[again] + 30.0,
                         "itemid": VITAL_ITEM["HR"], "valuenum": 250.0, "valueuom": "bpm"})
    implausible = late.assign(charttime=intime[again] + 5.0, valuenum=999.0)
    out["chartevents"] = pd.concat([tables["chartevents"], late, implausible], ignore_index=True)
    return out


def write_tables(result: SynthResult, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    for name, df in result.tables.items():
        path = out_dir / f"{name}.csv"
        write_table(df, path)
        written.append(path)
    path = out_dir / "ground_truth.csv"
    write_table(result.ground_truth, path)
    written.append(path)
    log_info(MODULE, f"wrote {len(written)} tables to {out_dir}")
    return written
