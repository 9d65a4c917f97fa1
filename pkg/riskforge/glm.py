"""
Logistic regression with Wald inference (IRLS), univariate screening and
VIF-based collinearity resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit
from scipy.stats import chi2, norm

from riskforge.lib.design import FeatureMatrix
from riskforge.lib.errors import ConstantColumn, RiskforgeError, Separation, SingularHessian
from riskforge.lib.logger import log_debug, log_info, log_warning

MODULE = "glm"

Z_95 = 1.959964
SCORE_TOL = 1e-8
MAX_ITER = 100
JITTER = 1e-8
SEPARATION_TOL = 1e-6
INTERCEPT = "const"

VIF_WARN = 5.0
VIF_DROP = 10.0
# (kept, dropped) when both members of a pair are collinear
DEFAULT_PREFERENCES = (("PT", "INR"), ("Hemoglobin", "Hematocrit"), ("MBP", "DBP"))


@dataclass(frozen=True)
class GlmConfig:
    alpha: float = 0.05
    vif_warn: float = VIF_WARN
    vif_drop: float = VIF_DROP
    preferences: tuple[tuple[str, str], ...] = DEFAULT_PREFERENCES

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if not 1.0 <= self.vif_warn <= self.vif_drop:
            raise ValueError("need 1 <= vif_warn <= vif_drop")


@dataclass(frozen=True)
class GlmFit:
    names: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    loglik: float
    loglik_null: float
    pseudo_r2: float
    n: int
    converged: bool
    iterations: int = 0

    @property
    def features(self) -> tuple[str, ...]:
        return self.names[1:]

    def summary(self) -> pd.DataFrame:
        return pd.DataFrame({"variable": list(self.names), "coef": self.coef, "se": self.se, "z": self.z,
                             "p": self.p, "ci_low": self.ci_low, "ci_high": self.ci_high})


def _loglik(y: np.ndarray, eta: np.ndarray) -> float:
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def null_loglik(y: np.ndarray) -> float:
    y = np.asarray(y, dtype=float)
    ybar = y.mean()
    if ybar <= 0.0 or ybar >= 1.0:
        return 0.0
    return float(len(y) * (ybar * np.log(ybar) + (1.0 - ybar) * np.log(1.0 - ybar)))


def _solve(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        try:
            return np.linalg.solve(H + JITTER * np.eye(H.shape[0]), g)
        except np.linalg.LinAlgError as e:
            raise SingularHessian("hessian", "singular after ridge jitter") from e


def _covariance(H: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.inv(H)
    except np.linalg.LinAlgError:
        try:
            return np.linalg.inv(H + JITTER * np.eye(H.shape[0]))
        except np.linalg.LinAlgError as e:
            raise SingularHessian("hessian", "information matrix not invertible") from e


def _design(X, names=None) -> tuple[np.ndarray, tuple[str, ...]]:
    if isinstance(X, FeatureMatrix):
        return X.values, X.names
    values = np.asarray(X, dtype=float)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(values.shape[1]))
    return values, names


def _build_fit(names, beta, H, y, eta, converged, iterations) -> GlmFit:
    cov = _covariance(H)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, 0.0)
    p = 2.0 * norm.sf(np.abs(z))
    ll0 = null_loglik(y)
    ll = ll0 if len(names) == 1 else _loglik(y, eta)
    pseudo = 1.0 - ll / ll0 if ll0 < 0 else 0.0
    return GlmFit(tuple(names), beta, se, z, p, beta - Z_95 * se, beta + Z_95 * se, ll, ll0,
                  float(pseudo), len(y), converged, iterations)


def fit_logistic(X, y, names=None, max_iter: int = MAX_ITER, tol: float = SCORE_TOL) -> GlmFit:
    """
    Newton/IRLS with an intercept column prepended. Converged when the
    mean-scale score max|X'(y - p)|/n drops below `tol`.
    """
    values, feat_names = _design(X, names)
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary 0/1")
    n = len(y)
    A = np.column_stack([np.ones(n), values])
    all_names = (INTERCEPT,) + tuple(feat_names)

    beta = np.zeros(A.shape[1])
    ybar = y.mean()
    if 0.0 < ybar < 1.0:
        beta[0] = np.log(ybar / (1.0 - ybar))
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        eta = A @ beta
        prob = expit(eta)
        if np.all(np.abs(prob - y) < SEPARATION_TOL):
            H = (A.T * (prob * (1.0 - prob))) @ A
            fit = _build_fit(all_names, beta, H + JITTER * np.eye(len(beta)), y, eta, False, iterations)
            raise Separation("y", "perfect separation: fitted probabilities reproduce the outcome", fit=fit)
        score = A.T @ (y - prob)
        if np.max(np.abs(score)) / n < tol:
            converged = True
            break
        H = (A.T * (prob * (1.0 - prob))) @ A
        beta = beta + _solve(H, score)
    eta = A @ beta
    prob = expit(eta)
    H = (A.T * (prob * (1.0 - prob))) @ A
    if not converged:
        log_warning(MODULE, f"IRLS stopped after {max_iter} iterations without convergence")
    return _build_fit(all_names, beta, H, y, eta, converged, iterations)


def predict_proba(fit: GlmFit, X: FeatureMatrix) -> np.ndarray:
    values = X.select(fit.features).values if fit.features else np.empty((X.n_rows, 0))
    return expit(fit.coef[0] + values @ fit.coef[1:])


def score_gradient(fit: GlmFit, X: FeatureMatrix, y) -> np.ndarray:
    """Mean-scale score at the fitted coefficients."""
    y = np.asarray(y, dtype=float)
    A = np.column_stack([np.ones(X.n_rows), X.select(fit.features).values])
    return A.T @ (y - expit(A @ fit.coef)) / len(y)


def likelihood_ratio_test(full: GlmFit, reduced: GlmFit) -> tuple[float, int, float]:
    df = len(full.coef) - len(reduced.coef)
    if df <= 0:
        raise ValueError("full model must have more coefficients than the reduced one")
    stat = max(0.0, 2.0 * (full.loglik - reduced.loglik))
    return stat, df, float(chi2.sf(stat, df))


def recalibrate(score, y, name: str = "score") -> GlmFit:
    """Univariate logistic fit of the outcome on a raw score."""
    return fit_logistic(np.asarray(score, dtype=float).reshape(-1, 1), y, names=(name,))


# === Univariate screening ===
def _screen_one(name, column, y):
    try:
        fit = fit_logistic(column.reshape(-1, 1), y, names=(name,))
        return name, float(fit.coef[1]), float(fit.p[1]), ""
    except RiskforgeError as e:
        return name, float("nan"), 1.0, type(e).__name__


def univariate_screen(X: FeatureMatrix, y, alpha: float = 0.05, n_jobs: int = 1) -> pd.DataFrame:
    rows = Parallel(n_jobs=n_jobs)(delayed(_screen_one)(name, X.column(name), y) for name in X.names)
    report = pd.DataFrame(rows, columns=["variable", "coef", "p", "reason"])
    report["significant"] = (report["p"] < alpha) & (report["reason"] == "")
    report = report[["variable", "coef", "p", "significant", "reason"]]
    log_info(MODULE, f"univariate screen: {int(report['significant'].sum())} of {len(report)} significant at {alpha}")
    return report


def format_p(p: float) -> str:
    return "<0.0001" if p < 1e-4 else f"{p:.4f}"


# === Collinearity ===
class VifStep(NamedTuple):
    dropped: str
    kept_instead: str
    reason: str


@dataclass(frozen=True)
class VifReport:
    initial: dict
    final: dict
    drop_sequence: list = field(default_factory=list)

    @property
    def kept(self) -> list[str]:
        return list(self.final)

    def table(self) -> pd.DataFrame:
        rows = []
        for name, value in self.initial.items():
            step = next((s for s in self.drop_sequence if s.dropped == name), None)
            rows.append({"variable": name, "vif_initial": value, "vif_final": self.final.get(name, np.nan),
                         "dropped": step is not None, "kept_instead": step.kept_instead if step else "",
                         "reason": step.reason if step else ""})
        return pd.DataFrame(rows, columns=["variable", "vif_initial", "vif_final", "dropped", "kept_instead",
                                           "reason"])


def vif_values(values: np.ndarray, names: Sequence[str] = ()) -> np.ndarray:
    """VIF_j = 1/(1 - R_j^2) from least squares of column j on the others plus an intercept."""
    n, k = values.shape
    out = np.empty(k)
    for j in range(k):
        target = values[:, j]
        sst = float(np.sum((target - target.mean()) ** 2))
        if sst == 0.0:
            label = names[j] if names else j
            log_debug(MODULE, f"{ConstantColumn.__name__}: {label} has zero variance, VIF undefined")
            out[j] = np.inf
            continue
        others = np.column_stack([np.ones(n), np.delete(values, j, axis=1)])
        coef, *_ = np.linalg.lstsq(others, target, rcond=None)
        ssr = float(np.sum((target - others @ coef) ** 2))
        r2 = 1.0 - ssr / sst
        out[j] = np.inf if r2 >= 1.0 - 1e-12 else 1.0 / (1.0 - r2)
    return out


def _ledger_candidate(names, vifs, threshold, preferences):
    best = None
    for keep, drop in preferences:
        for i, name in enumerate(names):
            if name != drop and not name.startswith(drop + "_"):
                continue
            partner = keep + name[len(drop):]
            if partner not in names or vifs[i] <= threshold:
                continue
            if best is None or vifs[i] > best[2]:
                best = (name, partner, vifs[i])
    return best


def vif(X: FeatureMatrix, threshold: float = VIF_DROP, warn: float = VIF_WARN,
        preferences: Sequence[tuple[str, str]] = DEFAULT_PREFERENCES) -> VifReport:
    """
    Drop variables until every VIF is at most `threshold`: constant columns
    first, then the non-preferred member of a ledger pair, then the largest VIF
    (the later column on ties).
    """
    if X.n_features < 2:
        raise ValueError("VIF needs at least two columns")
    names = list(X.names)
    values = X.values.copy()
    vifs = vif_values(values, names)
    initial = dict(zip(names, vifs.tolist()))
    steps = []
    while len(names) >= 2:
        sst = np.sum((values - values.mean(axis=0)) ** 2, axis=0)
        constant = np.flatnonzero(sst == 0.0)
        if constant.size:
            i = int(constant[0])
            steps.append(VifStep(names[i], "", "constant column"))
        elif np.max(vifs) <= threshold:
            break
        else:
            pick = _ledger_candidate(names, vifs, threshold, preferences)
            if pick is not None:
                i = names.index(pick[0])
                steps.append(VifStep(pick[0], pick[1], f"VIF {vifs[i]:.2f} > {threshold:g}, preference ledger"))
            else:
                top = np.max(vifs)
                i = int(np.flatnonzero(vifs == top)[-1])
                steps.append(VifStep(names[i], "", f"VIF {top:.2f} > {threshold:g}"))
        log_info(MODULE, f"VIF: dropped {steps[-1].dropped} ({steps[-1].reason})")
        del names[i]
        values = np.delete(values, i, axis=1)
        vifs = vif_values(values, names) if len(names) >= 2 else np.ones(len(names))
    final = dict(zip(names, vifs.tolist()))
    for name, value in final.items():
        if value > warn:
            log_warning(MODULE, f"VIF of {name} is {value:.2f}, above {warn:g} but kept")
    return VifReport(initial, final, steps)


def correlation_matrix(X: FeatureMatrix, names: Sequence[str] | None = None) -> pd.DataFrame:
    sub = X.select(names) if names is not None else X
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.corrcoef(sub.values, rowvar=False)
    corr = np.atleast_2d(corr)
    return pd.DataFrame(corr, index=list(sub.names), columns=list(sub.names))


def consolidate_features(lasso_set: Sequence[str], gbt_set: Sequence[str]) -> list[str]:
    """Union in stable order: LASSO names first, then GBT names not yet seen."""
    return list(dict.fromkeys(list(lasso_set) + list(gbt_set)))
