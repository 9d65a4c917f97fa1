"""
L1-penalized logistic regression by cyclic coordinate descent, with
cross-validated binomial deviance and the lambda selection rules.

Objective: (1/n) * sum(logistic loss) + lambda * sum(|beta_j|), intercept unpenalized.
Each coordinate is updated against the quadratic bound p(1-p) <= 1/4.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from riskforge.lib.accel import optional_njit
from riskforge.lib.design import FeatureMatrix
from riskforge.lib.errors import DegenerateFold, NonConvergence
from riskforge.lib.logger import log_debug, log_info

MODULE = "lasso"

COEF_TOL = 1e-7
MAX_SWEEPS = 100_000
GRID_SIZE = 100
GRID_RATIO = 1e-4
FOLDS = 10
RULES = ("min", "1se", "pct75")
PCT75 = 0.75
PROB_EPS = 1e-15


@dataclass(frozen=True)
class LassoConfig:
    folds: int = FOLDS
    grid_size: int = GRID_SIZE
    ratio: float = GRID_RATIO
    rule: str = "pct75"
    tol: float = COEF_TOL
    max_sweeps: int = MAX_SWEEPS
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("ratio must be in (0, 1)")
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}")
        if self.tol <= 0 or self.max_sweeps < 1:
            raise ValueError("tol must be > 0 and max_sweeps >= 1")


@optional_njit()
def _cd_kernel(XT, y, beta0, beta, lam, bound, tol, max_sweeps):
    # XT is (p, n) C-contiguous so each feature row is contiguous; beta is updated in place
    p, n = XT.shape
    eta = np.full(n, beta0)
    for j in range(p):
        if beta[j] != 0.0:
            eta += XT[j] * beta[j]
    for sweep in range(max_sweeps):
        prob = 0.5 * (1.0 + np.tanh(0.5 * eta))
        step = -4.0 * np.mean(prob - y)
        beta0 += step
        eta += step
        max_change = abs(step)
        for j in range(p):
            if bound[j] == 0.0:
                continue
            prob = 0.5 * (1.0 + np.tanh(0.5 * eta))
            g = np.dot(XT[j], prob - y) / n
            old = beta[j]
            z = old - g / bound[j]
            thr = lam / bound[j]
            if z > thr:
                new = z - thr
            elif z < -thr:
                new = z + thr
            else:
                new = 0.0
            if new != old:
                eta += XT[j] * (new - old)
                beta[j] = new
                if abs(new - old) > max_change:
                    max_change = abs(new - old)
        if max_change < tol:
            return beta0, sweep + 1, True
    return beta0, max_sweeps, False


@dataclass(frozen=True)
class LassoFit:
    names: tuple[str, ...]
    intercept: float
    coef: np.ndarray
    lam: float
    sweeps: int

    @property
    def nonzero(self) -> list[str]:
        return [n for n, c in zip(self.names, self.coef) if c != 0.0]


@dataclass(frozen=True)
class LassoPath:
    lambda_grid: np.ndarray
    intercepts: np.ndarray
    coef_path: np.ndarray
    nonzero_counts: np.ndarray


@dataclass(frozen=True)
class CvCurve:
    lambda_grid: np.ndarray
    mean_deviance: np.ndarray
    se_deviance: np.ndarray
    fold_deviance: np.ndarray
    lambda_min: float
    lambda_1se: float
    lambda_selected: float
    rule: str
    fold_count: int
    seed: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"lambda": self.lambda_grid, "mean_deviance": self.mean_deviance,
                             "se_deviance": self.se_deviance})


def _arrays(X, y):
    values = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=float)
    names = X.names if isinstance(X, FeatureMatrix) else tuple(f"x{i}" for i in range(values.shape[1]))
    return values, np.asarray(y, dtype=float), names


def lambda_max(X, y) -> float:
    values, y, _ = _arrays(X, y)
    if values.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(values.T @ (y - y.mean()))) / len(y))


def lambda_grid(lam_max: float, size: int = GRID_SIZE, ratio: float = GRID_RATIO) -> np.ndarray:
    if lam_max <= 0:
        raise ValueError("lambda_max must be positive")
    return np.geomspace(lam_max, lam_max * ratio, size)


def _start_intercept(y: np.ndarray) -> float:
    ybar = float(np.clip(y.mean(), PROB_EPS, 1 - PROB_EPS))
    return float(np.log(ybar / (1.0 - ybar)))


def _fit_arrays(values, y, lam, beta=None, beta0=None, tol=COEF_TOL, max_sweeps=MAX_SWEEPS):
    n = len(y)
    XT = np.ascontiguousarray(values.T, dtype=np.float64)
    bound = np.ascontiguousarray(np.sum(values ** 2, axis=0) / (4.0 * n), dtype=np.float64)
    beta = np.zeros(values.shape[1]) if beta is None else np.array(beta, dtype=np.float64)
    beta0 = _start_intercept(y) if beta0 is None else float(beta0)
    beta0, sweeps, ok = _cd_kernel(XT, np.ascontiguousarray(y, dtype=np.float64), beta0, beta, float(lam),
                                   bound, float(tol), int(max_sweeps))
    if not ok:
        raise NonConvergence(f"lambda={lam:.6g}", f"no convergence after {max_sweeps} sweeps")
    return float(beta0), beta, int(sweeps)


def fit_lasso(X, y, lam: float, tol: float = COEF_TOL, max_sweeps: int = MAX_SWEEPS,
              warm_start: LassoFit | None = None) -> LassoFit:
    values, y, names = _arrays(X, y)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    beta = warm_start.coef if warm_start is not None else None
    beta0 = warm_start.intercept if warm_start is not None else None
    intercept, coef, sweeps = _fit_arrays(values, y, lam, beta, beta0, tol, max_sweeps)
    return LassoFit(tuple(names), intercept, coef, float(lam), sweeps)


def lasso_path(X, y, grid, tol: float = COEF_TOL, max_sweeps: int = MAX_SWEEPS) -> LassoPath:
    """Fits along a descending grid, each warm-started from the previous solution."""
    values, y, _ = _arrays(X, y)
    grid = np.asarray(grid, dtype=float)
    coefs = np.zeros((len(grid), values.shape[1]))
    intercepts = np.zeros(len(grid))
    beta, beta0 = None, None
    for i, lam in enumerate(grid):
        beta0, beta, _ = _fit_arrays(values, y, lam, beta, beta0, tol, max_sweeps)
        coefs[i] = beta
        intercepts[i] = beta0
    return LassoPath(grid, intercepts, coefs, np.count_nonzero(coefs, axis=1))


# === Cross-validation ===
def _key_rank(seed: int, key) -> bytes:
    return hashlib.sha256(f"{seed}:{key}".encode("utf-8")).digest()


def stratified_folds(row_keys, y, folds: int, seed: int) -> np.ndarray:
    """
    Fold id per row. Within each outcome class rows are ordered by a seeded
    hash of their key and dealt round-robin, so the assignment follows row
    identity, not row position.
    """
    y = np.asarray(y)
    keys = list(row_keys) if len(row_keys) else list(range(len(y)))
    assignment = np.empty(len(y), dtype=np.int64)
    for label in (0, 1):
        rows = np.flatnonzero(y == label)
        if len(rows) < folds:
            raise DegenerateFold(f"class {label}", f"{len(rows)} rows cannot fill {folds} stratified folds")
        order = sorted(rows, key=lambda i: _key_rank(seed, keys[i]))
        for rank, i in enumerate(order):
            assignment[i] = rank % folds
    return assignment


def binomial_deviance(y, prob) -> float:
    prob = np.clip(prob, PROB_EPS, 1 - PROB_EPS)
    return float(-2.0 * np.mean(y * np.log(prob) + (1 - y) * np.log(1 - prob)))


def _fold_deviance(values, y, fold_ids, k, grid, tol, max_sweeps):
    train = fold_ids != k
    path = lasso_path(values[train], y[train], grid, tol, max_sweeps)
    test_x, test_y = values[~train], y[~train]
    eta = path.intercepts[:, None] + path.coef_path @ test_x.T
    prob = 0.5 * (1.0 + np.tanh(0.5 * eta))
    return np.array([binomial_deviance(test_y, p) for p in prob])


def select_lambda(curve: CvCurve, rule: str) -> float:
    if rule == "min":
        return curve.lambda_min
    if rule == "1se":
        return curve.lambda_1se
    if rule == "pct75":
        lo, hi = np.log(curve.lambda_min), np.log(curve.lambda_1se)
        return float(np.exp(lo + PCT75 * (hi - lo)))
    raise ValueError(f"unknown lambda rule {rule!r}, expected one of {RULES}")


def cv_deviance(X: FeatureMatrix, y, grid_size: int = GRID_SIZE, folds: int = FOLDS, seed: int = 0,
                rule: str = "pct75", ratio: float = GRID_RATIO, n_jobs: int = 1,
                tol: float = COEF_TOL, max_sweeps: int = MAX_SWEEPS) -> CvCurve:
    values, y, _ = _arrays(X, y)
    keys = X.row_keys if isinstance(X, FeatureMatrix) else ()
    fold_ids = stratified_folds(keys, y, folds, seed)
    grid = lambda_grid(lambda_max(values, y), grid_size, ratio)
    log_info(MODULE, f"CV: {folds} folds, {grid_size} lambdas from {grid[0]:.4g} to {grid[-1]:.4g}")

    per_fold = Parallel(n_jobs=n_jobs)(
        delayed(_fold_deviance)(values, y, fold_ids, k, grid, tol, max_sweeps) for k in range(folds))
    fold_dev = np.vstack(per_fold)
    mean = fold_dev.mean(axis=0)
    se = fold_dev.std(axis=0, ddof=1) / np.sqrt(folds)

    i_min = int(np.argmin(mean))
    within = np.flatnonzero(mean <= mean[i_min] + se[i_min])
    lam_min = float(grid[i_min])
    lam_1se = float(grid[within].max())
    curve = CvCurve(grid, mean, se, fold_dev, lam_min, lam_1se, lam_min, rule, folds, seed)
    selected = select_lambda(curve, rule)
    log_info(MODULE, f"lambda_min={lam_min:.4g} lambda_1se={lam_1se:.4g} selected ({rule})={selected:.4g}")
    return CvCurve(grid, mean, se, fold_dev, lam_min, lam_1se, selected, rule, folds, seed)


def selected_features(X: FeatureMatrix, y, lambda_selected: float) -> list[str]:
    """Refit on all rows at the chosen lambda; names of exactly nonzero coefficients, in column order."""
    if lambda_selected <= 0:
        raise ValueError("lambda_selected must be positive")
    fit = fit_lasso(X, y, lambda_selected)
    log_debug(MODULE, f"refit at {lambda_selected:.4g}: {len(fit.nonzero)} nonzero of {len(fit.names)}")
    return fit.nonzero
