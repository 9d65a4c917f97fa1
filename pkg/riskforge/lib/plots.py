"""
SVG figures for the run report. Rendering is headless (Agg) and the SVG
output carries no date and a fixed hash salt, so reruns are byte-identical.
"""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from riskforge.lib.artifacts import atomic_output  # noqa: E402

plt.rcParams["svg.hashsalt"] = "riskforge"
plt.rcParams["svg.fonttype"] = "path"
plt.rcParams["figure.dpi"] = 100

SVG_METADATA = {"Date": None}


def _save(fig, path):
    fig.tight_layout()
    with atomic_output(path) as tmp:
        fig.savefig(tmp, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


def plot_cv_curve(curve_frame: pd.DataFrame, lambda_min: float, lambda_1se: float, path, title=""):
    fig, ax = plt.subplots(figsize=(7, 5))
    log_lam = np.log(curve_frame["lambda"].to_numpy())
    ax.errorbar(log_lam, curve_frame["mean_deviance"], yerr=curve_frame["se_deviance"], fmt="o", ms=3,
                color="tab:red", ecolor="lightgray", capsize=2)
    ax.axvline(np.log(lambda_min), color="k", linestyle="--", linewidth=1, label="lambda_min")
    ax.axvline(np.log(lambda_1se), color="k", linestyle=":", linewidth=1, label="lambda_1se")
    ax.set_xlabel("log(lambda)")
    ax.set_ylabel("Binomial deviance")
    ax.set_title(title or "Cross-validated deviance")
    ax.legend(loc="upper left")
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def plot_roc(roc_frame: pd.DataFrame, aucs: dict, path, title=""):
    fig, ax = plt.subplots(figsize=(7, 7))
    for model, part in roc_frame.groupby("model", sort=False):
        ax.plot(part["fpr"], part["tpr"], linewidth=1.5, label=f"{model} (AUC = {aucs[model]:.3f})")
    ax.plot([0, 1], [0, 1], "k--", linewidth=1)
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("False Positive Rate")
    ax.set_ylabel("True Positive Rate")
    ax.set_title(title or "ROC")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def plot_calibration(calibration_frame: pd.DataFrame, path, title=""):
    fig, ax = plt.subplots(figsize=(7, 7))
    for model, part in calibration_frame.groupby("model", sort=False):
        ax.plot(part["mean_predicted"], part["event_rate"], marker="o", ms=4, linewidth=1.2, label=model)
    ax.plot([0, 1], [0, 1], "k--", linewidth=1, label="Perfectly calibrated")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("Mean predicted probability")
    ax.set_ylabel("Observed event rate")
    ax.set_title(title or "Calibration")
    ax.legend(loc="upper left", fontsize=8)
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def plot_dca(dca_frame: pd.DataFrame, path, title=""):
    fig, ax = plt.subplots(figsize=(8, 6))
    first = None
    for model, part in dca_frame.groupby("model", sort=False):
        ax.plot(part["threshold"], part["standardized_net_benefit"], linewidth=1.5, label=model)
        first = part if first is None else first
    if first is not None:
        ax.plot(first["threshold"], first["standardized_treat_all"], color="gray", linewidth=1, label="Treat all")
        ax.plot(first["threshold"], first["treat_none"], color="k", linewidth=1, label="Treat none")
    ax.set_ylim(-0.1, 1.05)
    ax.set_xlabel("Threshold probability")
    ax.set_ylabel("Standardized net benefit")
    ax.set_title(title or "Decision curve")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def plot_correlation(corr: pd.DataFrame, path, title=""):
    size = max(4.0, 0.5 * len(corr) + 2.0)
    fig, ax = plt.subplots(figsize=(size + 1.0, size))
    image = ax.imshow(corr.to_numpy(dtype=float), cmap="coolwarm", vmin=-1.0, vmax=1.0)
    ax.set_xticks(range(len(corr.columns)))
    ax.set_xticklabels(corr.columns, rotation=90, fontsize=7)
    ax.set_yticks(range(len(corr.index)))
    ax.set_yticklabels(corr.index, fontsize=7)
    fig.colorbar(image, ax=ax, fraction=0.046, pad=0.04)
    ax.set_title(title or "Correlation")
    _save(fig, path)
