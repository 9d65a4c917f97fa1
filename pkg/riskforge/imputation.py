"""
Missing-data handling: single imputation by policy, chained-equation multiple
imputation, and pooling of per-imputation logistic fits with Rubin's rules.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import norm, skew
from sklearn.linear_model import Ridge

from riskforge.glm import Z_95, GlmFit
from riskforge.lib.errors import AllMissingColumn, LayoutMismatch, MissingColumn, SingularDesign
from riskforge.lib.logger import log_debug, log_info, log_warning
from riskforge.lib.tabular import KEY_COLUMNS, PatientFrame

MODULE = "imputation"

METHODS = ("mean", "median", "mice", "zero", "none", "auto")
SKEW_THRESHOLD = 1.0

# tiered policy: >10% missing goes to MICE, low missingness to mean, skewed to median;
# the remaining labs and the GCS components pick mean or median from their skewness
DEFAULT_POLICIES = {
    "HR": "mean", "SBP": "median", "DBP": "mean", "MBP": "median", "RR": "median", "BT": "mice",
    "SpO2": "median",
    "Hematocrit": "auto", "Hemoglobin": "auto", "Platelets": "auto", "WBC": "auto", "PT": "mice",
    "INR": "auto", "Creatinine": "median", "BUN": "auto", "Glucose": "median", "Potassium": "auto",
    "Sodium": "mean", "Calcium": "auto", "Chloride": "auto", "AnionGap": "auto", "Bicarbonate": "mean",
    "Lactate": "mice", "pH": "mice",
    "GCS_Eye": "auto", "GCS_Verbal": "auto", "GCS_Motor": "auto",
}


@dataclass(frozen=True)
class ImputePolicy:
    variable: str
    method: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"{self.variable}: unknown imputation method {self.method!r}")


@dataclass(frozen=True)
class MiceConfig:
    m: int = 5
    max_iter: int = 10
    seed: int = 0
    regressor: str = "ridge-linear"
    ridge_penalty: float = 1e-3
    n_jobs: int = 1

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("m must be >= 2")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.regressor != "ridge-linear":
            raise ValueError(f"unsupported regressor {self.regressor!r}")
        if not self.ridge_penalty > 0:
            raise ValueError("ridge_penalty must be > 0")


def as_policies(policies) -> list[ImputePolicy]:
    if isinstance(policies, Mapping):
        return [ImputePolicy(v, m) for v, m in policies.items()]
    return list(policies)


def _resolve_method(values: np.ndarray, method: str) -> str:
    if method != "auto":
        return method
    observed = values[~np.isnan(values)]
    if observed.size < 3 or np.ptp(observed) == 0:
        return "mean"
    return "median" if abs(skew(observed)) > SKEW_THRESHOLD else "mean"


# === Single imputation ===
def impute_single(frame: PatientFrame, policies) -> PatientFrame:
    """Fill masked cells of mean/median/zero/auto variables; mice and none are left masked."""
    out = frame
    for policy in as_policies(policies):
        if policy.variable not in frame:
            raise MissingColumn(policy.variable, "imputation policy names an absent column")
        if policy.method in ("mice", "none"):
            continue
        values = out.values(policy.variable)
        masked = out.is_masked(policy.variable)
        if not masked.any():
            continue
        method = _resolve_method(values, policy.method)
        if method == "zero":
            fill = 0.0
        else:
            if masked.all():
                raise AllMissingColumn(policy.variable, f"no observed cells for {method} imputation")
            observed = values[~masked]
            fill = float(np.mean(observed) if method == "mean" else np.median(observed))
        log_debug(MODULE, f"{policy.variable}: {int(masked.sum())} cells filled by {method} ({fill:.4g})")
        out = out.with_column(policy.variable, np.where(masked, fill, values), mask=np.zeros(len(out), bool))
    return out


def resolved_methods(frame: PatientFrame, policies) -> dict:
    return {p.variable: _resolve_method(frame.values(p.variable), p.method)
            for p in as_policies(policies) if p.variable in frame}


def missing_report(frame: PatientFrame, policies) -> pd.DataFrame:
    """Per-variable missing counts before imputation, with the method applied."""
    methods = resolved_methods(frame, policies)
    n = max(len(frame), 1)
    rows = []
    for name in frame.columns:
        if name not in methods:
            continue
        missing = frame.masked_count(name)
        rows.append({"variable": name, "n_missing": missing, "pct_missing": round(100.0 * missing / n, 1),
                     "method": methods[name]})
    return pd.DataFrame(rows, columns=["variable", "n_missing", "pct_missing", "method"])


# === MICE ===
def _fit_column(current: np.ndarray, j: int, observed: np.ndarray, penalty: float):
    others = np.delete(current, j, axis=1)
    center = others.mean(axis=0)
    scale = others.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (others - center) / scale
    if observed.sum() < 2:
        raise SingularDesign(j, "fewer than two observed rows")
    model = Ridge(alpha=penalty)
    try:
        model.fit(Z[observed], current[observed, j])
    except (np.linalg.LinAlgError, ValueError) as e:
        raise SingularDesign(j, str(e)) from e
    resid = current[observed, j] - model.predict(Z[observed])
    sigma = float(np.std(resid, ddof=1)) if observed.sum() > 1 else 0.0
    return model.predict(Z[~observed]), sigma


def _run_chain(X: np.ndarray, masks: np.ndarray, targets: Sequence[int], names: Sequence[str],
               cfg: MiceConfig, chain: int) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed + chain)
    current = X.copy()
    for j in targets:
        col = current[:, j]
        col[masks[:, j]] = np.nanmean(X[:, j])
    fallback = set()
    for sweep in range(cfg.max_iter):
        for j in targets:
            if j in fallback:
                continue
            observed = ~masks[:, j]
            try:
                pred, sigma = _fit_column(current, j, observed, cfg.ridge_penalty)
            except SingularDesign as e:
                log_warning(MODULE, f"SingularDesign on {names[j]} ({e.reason}); keeping mean fill")
                fallback.add(j)
                continue
            current[~observed, j] = pred + rng.normal(0.0, sigma, size=pred.shape[0])
    return current


def mice_impute(frame: PatientFrame, cfg: MiceConfig, columns: Sequence[str] | None = None) -> list[PatientFrame]:
    """
    m completed copies of `frame`. Every numeric column is a predictor; the
    incomplete ones among `columns` (default: all) are imputed, fewest missing first.
    """
    names = [c for c in frame.columns if frame.is_numeric(c)]
    if len(names) < 2:
        raise ValueError("chained equations need at least two numeric columns")
    X = np.column_stack([frame.values(c) for c in names])
    masks = np.column_stack([frame.is_masked(c) for c in names])
    wanted = names if columns is None else list(columns)
    for c in wanted:
        if c not in names:
            raise MissingColumn(c, "not a numeric column of the frame")
    targets = [names.index(c) for c in wanted if masks[:, names.index(c)].any()]
    if not targets:
        log_info(MODULE, "no masked cells to impute, returning identical copies")
        return [frame for _ in range(cfg.m)]
    for j in targets:
        if masks[:, j].all():
            raise AllMissingColumn(names[j], "no observed cells for chained equations")
    targets.sort(key=lambda j: (int(masks[:, j].sum()), j))

    log_info(MODULE, f"MICE: m={cfg.m}, {cfg.max_iter} sweeps, imputing {[names[j] for j in targets]}")
    chains = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_run_chain)(X, masks, targets, names, cfg, k) for k in range(cfg.m))

    completed = []
    for filled in chains:
        out = frame
        for j in targets:
            out = out.with_column(names[j], filled[:, j], mask=np.zeros(len(frame), bool))
        completed.append(out)
    return completed


def chained_predictors(frame: PatientFrame, targets: Sequence[str], exclude: Sequence[str] = KEY_COLUMNS) -> list[str]:
    """
    Columns handed to the chained equations: the targets plus every complete
    numeric column not in `exclude`. The outcome is a predictor, never a target.
    """
    wanted = set(targets)
    return [c for c in frame.columns
            if c not in exclude and frame.is_numeric(c) and (c in wanted or not frame.is_masked(c).any())]


def pool_frames(frames: Sequence[PatientFrame]) -> PatientFrame:
    """Cell-wise mean of the completed datasets; non-numeric columns come from the first."""
    if not frames:
        raise ValueError("no frames to pool")
    first = frames[0]
    out = first
    for name in first.columns:
        if not first.is_numeric(name):
            continue
        stacked = np.column_stack([f.values(name) for f in frames])
        out = out.with_column(name, stacked.mean(axis=1), mask=first.is_masked(name))
    return out


# === Rubin's rules ===
@dataclass(frozen=True)
class RubinPooled:
    names: tuple[str, ...]
    beta_mi: np.ndarray
    within_var: np.ndarray
    between_var: np.ndarray
    total_var: np.ndarray
    per_imputation_fits: tuple
    m: int

    @property
    def coef(self) -> np.ndarray:
        return self.beta_mi

    @property
    def features(self) -> tuple[str, ...]:
        return self.names[1:]

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.total_var)

    @property
    def z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.beta_mi / self.se

    @property
    def p(self) -> np.ndarray:
        return 2.0 * norm.sf(np.abs(self.z))

    @property
    def ci_low(self) -> np.ndarray:
        return self.beta_mi - Z_95 * self.se

    @property
    def ci_high(self) -> np.ndarray:
        return self.beta_mi + Z_95 * self.se

    @property
    def pseudo_r2(self) -> float:
        return float(np.mean([f.pseudo_r2 for f in self.per_imputation_fits]))

    def summary(self) -> pd.DataFrame:
        return pd.DataFrame({
            "variable": list(self.names), "coef": self.beta_mi, "se": self.se, "z": self.z, "p": self.p,
            "ci_low": self.ci_low, "ci_high": self.ci_high,
            "within_var": self.within_var, "between_var": self.between_var, "total_var": self.total_var,
        })


def rubin_pool(fits: Sequence[GlmFit], m: int) -> RubinPooled:
    if len(fits) != m or m < 1:
        raise LayoutMismatch("fits", f"expected {m} fits, got {len(fits)}")
    layout = tuple(fits[0].names)
    for f in fits[1:]:
        if tuple(f.names) != layout or f.coef.shape != fits[0].coef.shape:
            raise LayoutMismatch("coef", f"layouts differ: {list(layout)} vs {list(f.names)}")
    betas = np.vstack([f.coef for f in fits])
    ses = np.vstack([f.se for f in fits])
    beta_mi = betas.mean(axis=0)
    within = (ses ** 2).mean(axis=0)
    between = betas.var(axis=0, ddof=1) if m > 1 else np.zeros_like(beta_mi)
    total = within + (1.0 + 1.0 / m) * between
    return RubinPooled(layout, beta_mi, within, between, total, tuple(fits), m)
