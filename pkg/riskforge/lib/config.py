"""
Run configuration: DEFAULT_CONFIG merged with a sectioned INI file.

Missing keys fall back to their defaults with a warning; unknown keys and
out-of-range values are rejected with ConfigInvalid("section.key", reason).
"""
from __future__ import annotations

import configparser
import copy
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from riskforge.cohort import DEFAULT_ICD_CODES, CohortConfig
from riskforge.gbt import TOP_K_MULTIMODAL, TOP_K_STRUCTURED, GbtConfig
from riskforge.glm import GlmConfig
from riskforge.harmonization import DEFAULT_PLAUSIBILITY, PlausibilityRule, parse_rule
from riskforge.imputation import DEFAULT_POLICIES, ImputePolicy, MiceConfig
from riskforge.lasso import LassoConfig
from riskforge.lib.errors import ConfigInvalid
from riskforge.lib.logger import log_debug, log_warning
from riskforge.scoring_eval import EvalConfig
from riskforge.synth import SynthConfig
from riskforge.text_features import TextConfig

MODULE = "config"

TABLES = ("diagnoses_icd", "patients", "icustays", "admissions", "chartevents", "labevents",
          "procedureevents", "inputevents", "discharge", "radiology", "discharge_emb", "radiology_emb")

# sections whose keys are variable names; a missing section is defaulted with one warning
VARIABLE_SECTIONS = ("plausibility", "impute")
# per-table path overrides are optional and default silently
OPTIONAL_KEYS = frozenset(("paths", t) for t in TABLES)

DEFAULT_CONFIG = {
    "paths": {"input_dir": "", "out_dir": "runs/latest", **{t: "" for t in TABLES}},
    "cohort": {"icd_codes": ",".join(DEFAULT_ICD_CODES), "min_age": 18, "strict": False},
    "plausibility": dict(DEFAULT_PLAUSIBILITY),
    "impute": dict(DEFAULT_POLICIES),
    "mice": {"m": 5, "max_iter": 10, "regressor": "ridge-linear", "ridge_penalty": 1e-3},
    "text": {"vocab_size": 500, "svd_target": 0.80, "pca_target": 0.90},
    "lasso": {"folds": 10, "grid_size": 100, "ratio": 1e-4, "rule": "pct75", "tol": 1e-7, "max_sweeps": 100000},
    "gbt": {"max_depth": 3, "learning_rate": 0.05, "n_trees": 100, "subsample": 0.8, "reg_lambda": 1.0,
            "gamma": 0.0, "top_k_structured": TOP_K_STRUCTURED, "top_k_multimodal": TOP_K_MULTIMODAL},
    "glm": {"alpha": 0.05, "vif_warn": 5.0, "vif_drop": 10.0, "prefer": "PT>INR,Hemoglobin>Hematocrit,MBP>DBP"},
    "eval": {"calibration_bins": 10, "threshold": 0.5, "dca_start": 0.01, "dca_stop": 0.99, "dca_step": 0.01},
    "split": {"train_fraction": 0.8, "seed": 42},
    "synth": {"n_patients": 2000, "prevalence": 0.52, "text_signal_strength": 1.0, "embedding_dim": 64,
              "distractors": True},
    "run": {"seed": 7, "n_jobs": 1, "log_dir": "logs"},
}

# origin notes printed by echo_config
ANNOTATIONS = {
    ("cohort", "icd_codes"): "ICD-9 427.5 and ICD-10 I46.x cardiac arrest",
    ("cohort", "min_age"): "adults only",
    ("mice", "m"): "five imputed datasets",
    ("text", "vocab_size"): "500-term vocabulary per note kind",
    ("text", "svd_target"): "80% variance for TF-IDF SVD",
    ("text", "pca_target"): "90% variance for embedding PCA",
    ("lasso", "folds"): "10-fold CV",
    ("lasso", "rule"): "75th percentile between lambda_min and lambda_1se",
    ("gbt", "top_k_structured"): "17 structured GBT features",
    ("gbt", "top_k_multimodal"): "64 multimodal GBT features",
    ("glm", "alpha"): "univariate screen at p < 0.05",
    ("glm", "vif_warn"): "VIF above 5 flagged",
    ("glm", "vif_drop"): "VIF above 10 dropped",
    ("glm", "prefer"): "keep PT, Hemoglobin, MBP",
    ("eval", "dca_start"): "threshold probabilities 0.01 to 0.99",
    ("eval", "dca_stop"): "threshold probabilities 0.01 to 0.99",
    ("synth", "prevalence"): "52% in-hospital mortality",
}

# (low, high, low_open, high_open)
RANGES = {
    ("text", "svd_target"): (0.0, 1.0, True, False),
    ("text", "pca_target"): (0.0, 1.0, True, False),
    ("split", "train_fraction"): (0.0, 1.0, True, True),
    ("synth", "prevalence"): (0.0, 1.0, True, True),
    ("gbt", "subsample"): (0.0, 1.0, True, False),
    ("gbt", "learning_rate"): (0.0, 1.0, True, False),
    ("glm", "alpha"): (0.0, 1.0, True, True),
    ("eval", "threshold"): (0.0, 1.0, True, True),
    ("eval", "dca_start"): (0.0, 1.0, True, True),
    ("eval", "dca_stop"): (0.0, 1.0, True, True),
    ("eval", "dca_step"): (0.0, 1.0, True, True),
    ("mice", "ridge_penalty"): (0.0, float("inf"), True, True),
    ("lasso", "ratio"): (0.0, 1.0, True, True),
}
MINIMUMS = {
    ("mice", "m"): 2, ("mice", "max_iter"): 1, ("text", "vocab_size"): 1, ("lasso", "folds"): 2,
    ("lasso", "grid_size"): 2, ("lasso", "max_sweeps"): 1, ("gbt", "max_depth"): 1, ("gbt", "n_trees"): 0,
    ("gbt", "top_k_structured"): 1, ("gbt", "top_k_multimodal"): 1, ("eval", "calibration_bins"): 1,
    ("synth", "n_patients"): 10, ("synth", "embedding_dim"): 5, ("run", "n_jobs"): -1, ("cohort", "min_age"): 0,
}


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    seed: int = 42


@dataclass(frozen=True)
class PathsConfig:
    input_dir: Path | None
    out_dir: Path
    overrides: Mapping[str, str]

    @property
    def synth_dir(self) -> Path:
        return self.out_dir / "synth"

    def table(self, name: str) -> Path:
        """Raw input table; without an input_dir the synth stage output is read."""
        override = self.overrides.get(name, "")
        if override:
            return Path(override)
        return (self.input_dir or self.synth_dir) / f"{name}.csv"


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig
    cohort: CohortConfig
    cohort_strict: bool
    rules: tuple[PlausibilityRule, ...]
    policies: tuple[ImputePolicy, ...]
    mice: MiceConfig
    text: TextConfig
    lasso: LassoConfig
    gbt: GbtConfig
    top_k: Mapping[str, int]
    glm: GlmConfig
    eval: EvalConfig
    split: SplitConfig
    synth: SynthConfig
    seed: int
    n_jobs: int
    log_dir: Path
    raw: Mapping[str, Mapping[str, object]]


def stage_seed(root_seed: int, stage: str) -> int:
    """Per-stage seed: first four bytes of sha256("<root>:<stage>"), big-endian."""
    return int.from_bytes(hashlib.sha256(f"{root_seed}:{stage}".encode("utf-8")).digest()[:4], "big")


# === Parsing ===
def _coerce(section: str, key: str, text: str, default):
    field_path = f"{section}.{key}"
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {text!r}")
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as e:
        raise ConfigInvalid(field_path, str(e)) from e
    return text


def _check_ranges(values: Mapping[str, Mapping[str, object]]) -> None:
    for (section, key), (low, high, low_open, high_open) in RANGES.items():
        v = values[section][key]
        ok = (v > low if low_open else v >= low) and (v < high if high_open else v <= high)
        if not ok:
            left, right = "(" if low_open else "[", ")" if high_open else "]"
            raise ConfigInvalid(f"{section}.{key}", f"{v} outside {left}{low:g}, {high:g}{right}")
    for (section, key), low in MINIMUMS.items():
        if values[section][key] < low:
            raise ConfigInvalid(f"{section}.{key}", f"{values[section][key]} below minimum {low}")
    if values["eval"]["dca_start"] >= values["eval"]["dca_stop"]:
        raise ConfigInvalid("eval.dca_stop", "must exceed eval.dca_start")


def merge_config(parser: configparser.ConfigParser | None = None) -> dict:
    """DEFAULT_CONFIG overlaid with the parser's values, coerced to the default types."""
    values = copy.deepcopy(DEFAULT_CONFIG)
    sections = set(parser.sections()) if parser is not None else set()
    for section in sections - set(DEFAULT_CONFIG):
        raise ConfigInvalid(section, "unknown section")

    for section, defaults in DEFAULT_CONFIG.items():
        given = dict(parser.items(section)) if section in sections else {}
        for key in given:
            if key not in defaults:
                raise ConfigInvalid(f"{section}.{key}", "unknown key")
        if section in VARIABLE_SECTIONS and not given:
            if parser is not None:
                log_warning(MODULE, f"[{section}] not given, using {len(defaults)} default entries")
            continue
        for key, default in defaults.items():
            if key in given:
                values[section][key] = _coerce(section, key, given[key], default)
            elif parser is not None and (section, key) not in OPTIONAL_KEYS:
                log_warning(MODULE, f"{section}.{key} not given, using default {default!r}")
    _check_ranges(values)
    return values


def _preferences(text: str) -> tuple[tuple[str, str], ...]:
    pairs = []
    for item in filter(None, (p.strip() for p in text.split(","))):
        keep, sep, drop = item.partition(">")
        if not sep or not keep.strip() or not drop.strip():
            raise ConfigInvalid("glm.prefer", f"expected keep>drop, got {item!r}")
        pairs.append((keep.strip(), drop.strip()))
    return tuple(pairs)


def build_run_config(values: Mapping[str, Mapping[str, object]]) -> RunConfig:
    """Typed configuration tree from merged values; stage seeds derive from run.seed."""
    root = int(values["run"]["seed"])

    def build(section, factory, **kwargs):
        try:
            return factory(**kwargs)
        except ValueError as e:
            raise ConfigInvalid(section, str(e)) from e

    try:
        rules = tuple(parse_rule(v, str(t)) for v, t in values["plausibility"].items())
    except ValueError as e:
        raise ConfigInvalid("plausibility", str(e)) from e
    policies = tuple(build(f"impute.{v}", ImputePolicy, variable=v, method=str(m))
                     for v, m in values["impute"].items())

    paths = values["paths"]
    gbt = dict(values["gbt"])
    top_k = {"structured": gbt.pop("top_k_structured"), "multimodal": gbt.pop("top_k_multimodal")}
    glm = values["glm"]
    cfg = RunConfig(
        paths=PathsConfig(Path(paths["input_dir"]) if paths["input_dir"] else None, Path(paths["out_dir"]),
                          {t: paths[t] for t in TABLES}),
        cohort=build("cohort", CohortConfig, icd_codes=tuple(str(values["cohort"]["icd_codes"]).split(",")),
                     min_age=values["cohort"]["min_age"]),
        cohort_strict=bool(values["cohort"]["strict"]),
        rules=rules,
        policies=policies,
        mice=build("mice", MiceConfig, seed=stage_seed(root, "impute"), n_jobs=values["run"]["n_jobs"],
                   **values["mice"]),
        text=build("text", TextConfig, **values["text"]),
        lasso=build("lasso", LassoConfig, seed=stage_seed(root, "select"), **values["lasso"]),
        gbt=build("gbt", GbtConfig, seed=stage_seed(root, "gbt"), **gbt),
        top_k=top_k,
        glm=build("glm", GlmConfig, alpha=glm["alpha"], vif_warn=glm["vif_warn"], vif_drop=glm["vif_drop"],
                  preferences=_preferences(str(glm["prefer"]))),
        eval=build("eval", EvalConfig, **values["eval"]),
        split=build("split", SplitConfig, **values["split"]),
        synth=build("synth", SynthConfig, seed=stage_seed(root, "synth"), **values["synth"]),
        seed=root,
        n_jobs=int(values["run"]["n_jobs"]),
        log_dir=Path(values["run"]["log_dir"]),
        raw=values,
    )
    log_debug(MODULE, f"run seed {root}: impute {cfg.mice.seed}, select {cfg.lasso.seed}, gbt {cfg.gbt.seed}")
    return cfg


def validate_config(path=None, seed: int | None = None, out_dir=None) -> RunConfig:
    """Read, merge and check a config file; `seed` and `out_dir` override run.seed and paths.out_dir."""
    parser = None
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except FileNotFoundError as e:
            raise ConfigInvalid("config", f"{path} not found") from e
        except configparser.Error as e:
            raise ConfigInvalid("config", str(e).splitlines()[0]) from e
    values = merge_config(parser)
    if seed is not None:
        values["run"]["seed"] = int(seed)
    if out_dir is not None:
        values["paths"]["out_dir"] = str(out_dir)
    return build_run_config(values)


def echo_config(cfg: RunConfig) -> str:
    """Normalized INI text in DEFAULT_CONFIG order, defaults with a known origin annotated."""
    lines = []
    for section, defaults in DEFAULT_CONFIG.items():
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        for key in defaults:
            value = cfg.raw[section][key]
            text = str(value).lower() if isinstance(value, bool) else str(value)
            note = ANNOTATIONS.get((section, key))
            if note and value == defaults[key]:
                lines.append(f"{key} = {text}  ; <- {note}")
            else:
                lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
