"""
Stage orchestration. Every stage reads its upstream checkpoints from the run
directory, writes its own outputs atomically and returns the paths written.

    synth -> cohort -> features -> impute -> text -> select -> fit -> evaluate -> report
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from riskforge import gbt, glm, text_features
from riskforge.cohort import (ADMISSIONS_SCHEMA, DIAGNOSES_SCHEMA, ICUSTAYS_SCHEMA, PATIENTS_SCHEMA,
                              build_cohort)
from riskforge.harmonization import (BASE_VARIABLES, CHARTEVENTS_SCHEMA, FLAG_COLUMNS, INPUTEVENTS_SCHEMA,
                                     LABEVENTS_SCHEMA, PROCEDUREEVENTS_SCHEMA, add_gcs_total, build_structured,
                                     model_columns)
from riskforge.imputation import (chained_predictors, impute_single, mice_impute, missing_report, pool_frames,
                                  rubin_pool)
from riskforge.lasso import cv_deviance, selected_features
from riskforge.lib import plots
from riskforge.lib.artifacts import dump_object, load_object, read_table, read_text, require, write_table, write_text
from riskforge.lib.config import RunConfig
from riskforge.lib.design import FeatureMatrix, fit_standardizer, from_frame, standardize
from riskforge.lib.errors import IoFailure, Separation
from riskforge.lib.logger import log_info, log_warning
from riskforge.lib.tabular import KEY_COLUMNS, JoinSpec, PatientFrame, join, read_csv, write_csv
from riskforge.scoring_eval import evaluate_models, news2_frame
from riskforge.synth import generate, write_tables
from riskforge.text_features import NOTE_KINDS, NOTES_SCHEMA

MODULE = "pipeline"

STAGES = ("synth", "cohort", "features", "impute", "text", "select", "fit", "evaluate", "report")
LABEL = "in_hospital_death"

SETTINGS = ("structured", "multimodal")
SETTING_LABEL = {"structured": "Structured only", "multimodal": "Structured + Text"}
MODELS = ("LASSO", "GBT", "Combined")
NEWS2 = "NEWS2"
BOOSTED = "GBT-boosted"


# === Checkpoint helpers ===
def _stage_dir(cfg: RunConfig, stage: str) -> Path:
    return cfg.paths.out_dir / stage


def _read_frame(path, stage: str) -> PatientFrame:
    """Stage frames are all numeric; blank cells come back masked."""
    path = require(path, stage)
    header = pd.read_csv(path, nrows=0, encoding="utf-8").columns
    return read_csv(path, {c: "float" for c in header})


def _imputed_paths(cfg: RunConfig) -> list[Path]:
    return [_stage_dir(cfg, "impute") / f"imputed_{k + 1}.csv" for k in range(cfg.mice.m)]


def _labels(frame: PatientFrame) -> np.ndarray:
    return frame.values(LABEL).astype(np.int64)


def _with_text(frame: PatientFrame, cfg: RunConfig, setting: str) -> PatientFrame:
    if setting == "structured":
        return frame
    text = _read_frame(_stage_dir(cfg, "text") / "text_features.csv", "text")
    return join(frame, text, JoinSpec(("hadm_id",), "left"))


def _setting_columns(frame: PatientFrame, setting: str) -> list[str]:
    columns = [c for c in ["anchor_age"] + BASE_VARIABLES + FLAG_COLUMNS if c in frame]
    if setting == "multimodal":
        columns += text_features.text_columns(frame)
    return columns


# === synth ===
def stage_synth(cfg: RunConfig) -> list[Path]:
    result = generate(cfg.synth)
    return write_tables(result, cfg.paths.synth_dir)


# === cohort ===
def stage_cohort(cfg: RunConfig) -> list[Path]:
    tables = {
        "diagnoses_icd": DIAGNOSES_SCHEMA, "patients": PATIENTS_SCHEMA,
        "icustays": ICUSTAYS_SCHEMA, "admissions": ADMISSIONS_SCHEMA,
    }
    frames = {name: read_csv(cfg.paths.table(name), schema) for name, schema in tables.items()}
    result = build_cohort(frames["diagnoses_icd"], frames["patients"], frames["icustays"], frames["admissions"],
                          cfg.cohort, strict=cfg.cohort_strict)
    out = _stage_dir(cfg, "cohort")
    write_csv(result.frame, out / "cohort.csv")
    write_table(result.flow, out / "flow.csv")
    return [out / "cohort.csv", out / "flow.csv"]


# === features ===
def stage_features(cfg: RunConfig) -> list[Path]:
    cohort = _read_frame(_stage_dir(cfg, "cohort") / "cohort.csv", "cohort")
    result = build_structured(
        cohort,
        read_csv(cfg.paths.table("chartevents"), CHARTEVENTS_SCHEMA),
        read_csv(cfg.paths.table("labevents"), LABEVENTS_SCHEMA),
        read_csv(cfg.paths.table("diagnoses_icd"), DIAGNOSES_SCHEMA),
        read_csv(cfg.paths.table("procedureevents"), PROCEDUREEVENTS_SCHEMA),
        read_csv(cfg.paths.table("inputevents"), INPUTEVENTS_SCHEMA),
        rules=cfg.rules,
    )
    out = _stage_dir(cfg, "features")
    paths = [out / "structured_aggregates.csv", out / "structured.csv", out / "plausibility_report.csv",
             out / "unlinked.csv"]
    write_csv(result.frame, paths[0])
    write_csv(model_columns(result.frame), paths[1])
    write_table(result.removed, paths[2])
    write_table(pd.DataFrame(sorted(result.unlinked.items()), columns=["table", "unlinked_rows"]), paths[3])
    for table, count in result.unlinked.items():
        if count:
            log_warning(MODULE, f"UnlinkedEvent: {count} {table} rows match no cohort stay")
    return paths


# === impute ===
def stage_impute(cfg: RunConfig) -> list[Path]:
    frame = _read_frame(_stage_dir(cfg, "features") / "structured.csv", "features")
    policies = [p for p in cfg.policies if p.variable in frame]
    absent = [p.variable for p in cfg.policies if p.variable not in frame]
    if absent:
        log_warning(MODULE, f"no measurements at all for {absent}, their policies are skipped")

    single = impute_single(frame, policies)
    mice_columns = [p.variable for p in policies if p.method == "mice"]
    predictors = chained_predictors(single, mice_columns)
    completed = mice_impute(single.select(predictors), cfg.mice, mice_columns)

    out = _stage_dir(cfg, "impute")
    paths, frames = [], []
    for path, done in zip(_imputed_paths(cfg), completed):
        full = single
        for name in mice_columns:
            full = full.with_column(name, done.values(name), mask=done.is_masked(name))
        full = add_gcs_total(full)
        write_csv(full, path)
        frames.append(full)
        paths.append(path)
    write_csv(pool_frames(frames), out / "pooled.csv")
    write_table(missing_report(frame, policies), out / "imputation_report.csv")
    return paths + [out / "pooled.csv", out / "imputation_report.csv"]


# === text ===
def _optional_table(cfg: RunConfig, name: str) -> Path | None:
    path = cfg.paths.table(name)
    if not path.exists():
        log_warning(MODULE, f"{path} not found, no {name} block")
        return None
    return path


def stage_text(cfg: RunConfig) -> list[Path]:
    cohort = _read_frame(_stage_dir(cfg, "cohort") / "cohort.csv", "cohort")
    notes, embeddings = {}, {}
    for kind in NOTE_KINDS:
        path = _optional_table(cfg, kind)
        if path is not None:
            notes[kind] = read_csv(path, NOTES_SCHEMA)
        path = _optional_table(cfg, f"{kind}_emb")
        if path is not None:
            embeddings[kind] = text_features.read_embeddings(path, cohort)
    artifacts = text_features.build_text_features(cohort, notes, embeddings, cfg.text)

    out = _stage_dir(cfg, "text")
    paths = [out / "text_features.csv", out / "coverage.txt"]
    write_csv(artifacts.frame, paths[0])
    write_text("\n".join(artifacts.coverage) + "\n", paths[1])
    for kind, model in artifacts.tfidf.items():
        path = out / f"{kind}_vocabulary.csv"
        write_table(pd.DataFrame({"term": list(model.vocabulary), "df": model.df, "idf": model.idf}), path)
        paths.append(path)
    for name, basis in artifacts.bases.items():
        path = out / f"{name}.basis.csv"
        text_features.save_basis(basis, path)
        paths.append(path)
        log_info(MODULE, f"{name}: {basis.retained} components, {basis.cumulative:.3f} of variance")
    return paths


# === select ===
def split_rows(y: np.ndarray, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Stratified holdout; both index arrays sorted."""
    train, validation = train_test_split(np.arange(len(y)), train_size=cfg.split.train_fraction,
                                         stratify=y, random_state=cfg.split.seed)
    return np.sort(train), np.sort(validation)


def _resolve_collinearity(Xs: FeatureMatrix, names: list[str], cfg: RunConfig, out: Path, tag: str):
    if len(names) < 2:
        return list(names), None
    report = glm.vif(Xs.select(names), cfg.glm.vif_drop, cfg.glm.vif_warn, cfg.glm.preferences)
    write_table(report.table(), out / f"{tag}_vif.csv")
    return report.kept, report


def _select_setting(frame: PatientFrame, setting: str, train: np.ndarray, cfg: RunConfig, out: Path) -> dict:
    columns = _setting_columns(frame, setting)
    X = from_frame(frame, columns)
    y = _labels(frame)[train]
    scaler = fit_standardizer(X.take(train))
    Xs = standardize(scaler, X.take(train))
    log_info(MODULE, f"{setting}: {Xs.n_features} candidate features, {Xs.n_rows} training rows")

    lc = cfg.lasso
    curve = cv_deviance(Xs, y, lc.grid_size, lc.folds, lc.seed, lc.rule, lc.ratio, cfg.n_jobs, lc.tol,
                        lc.max_sweeps)
    lasso_set = selected_features(Xs, y, curve.lambda_selected)
    write_table(curve.to_frame(), out / f"{setting}_cv_curve.csv")
    write_table(pd.DataFrame({"lambda_min": [curve.lambda_min], "lambda_1se": [curve.lambda_1se],
                              "lambda_selected": [curve.lambda_selected], "rule": [lc.rule],
                              "n_selected": [len(lasso_set)]}), out / f"{setting}_lambda.csv")
    plots.plot_cv_curve(curve.to_frame(), curve.lambda_min, curve.lambda_1se, out / f"{setting}_cv_curve.svg",
                        title=f"LASSO cross-validation ({SETTING_LABEL[setting]})")

    booster = gbt.fit_gbt(Xs, y, cfg.gbt)
    gbt_set = gbt.top_k_features(booster, cfg.top_k[setting])
    write_table(gbt.importance_table(booster), out / f"{setting}_gbt_importance.csv")
    write_text(gbt.dumps(booster), out / f"{setting}_gbt.txt")

    candidates = glm.consolidate_features(lasso_set, gbt_set)
    screen = glm.univariate_screen(Xs.select(candidates), y, cfg.glm.alpha, cfg.n_jobs)
    write_table(screen, out / f"{setting}_screen.csv")
    significant = set(screen.loc[screen["significant"], "variable"])

    pools = {"LASSO": lasso_set, "GBT": gbt_set, "Combined": candidates}
    models, combined_report = {}, None
    for model, pool in pools.items():
        kept, report = _resolve_collinearity(Xs, [c for c in pool if c in significant], cfg, out,
                                             f"{setting}_{model}")
        models[model] = kept
        combined_report = report if model == "Combined" else combined_report
        log_info(MODULE, f"{setting} {model}: {len(pool)} selected, {len(kept)} after screening and VIF")

    if combined_report is not None:
        flagged = [n for n, v in combined_report.initial.items() if v > cfg.glm.vif_warn]
        if len(flagged) >= 2:
            corr = glm.correlation_matrix(Xs, flagged)
            write_table(corr.rename_axis("variable").reset_index(), out / f"{setting}_correlation.csv")
            plots.plot_correlation(corr, out / f"{setting}_correlation.svg",
                                   title=f"High-VIF variables ({SETTING_LABEL[setting]})")

    return {"columns": columns, "scaler": scaler, "lambda_selected": curve.lambda_selected,
            "lasso": lasso_set, "gbt": gbt_set, "models": models}


def stage_select(cfg: RunConfig) -> list[Path]:
    pooled = _read_frame(_stage_dir(cfg, "impute") / "pooled.csv", "impute")
    y = _labels(pooled)
    train, validation = split_rows(y, cfg)
    out = _stage_dir(cfg, "select")
    split = pooled.select(list(KEY_COLUMNS)).to_dataframe().astype("int64")
    split["set"] = np.where(np.isin(np.arange(len(y)), train), "train", "validation")
    write_table(split, out / "split.csv")

    bundle = {"train": train, "validation": validation, "settings": {}}
    for setting in SETTINGS:
        frame = _with_text(pooled, cfg, setting)
        bundle["settings"][setting] = _select_setting(frame, setting, train, cfg, out)
    dump_object(bundle, out / "selection.pkl")
    return sorted(out.iterdir())


# === fit ===
def _fit_imputation(X: FeatureMatrix, y: np.ndarray, tag: str):
    try:
        return glm.fit_logistic(X, y)
    except Separation as e:
        if e.fit is None:
            raise
        log_warning(MODULE, f"{tag}: Separation ({e.reason}), keeping the last iterate")
        return e.fit


def stage_fit(cfg: RunConfig) -> list[Path]:
    bundle = load_object(_stage_dir(cfg, "select") / "selection.pkl", "select")
    train = bundle["train"]
    imputed = [_read_frame(p, "impute") for p in _imputed_paths(cfg)]
    y = _labels(imputed[0])[train]
    out = _stage_dir(cfg, "fit")
    paths, rows, models = [], [], {}

    for setting, chosen in bundle["settings"].items():
        designs = []
        for frame in imputed:
            X = from_frame(_with_text(frame, cfg, setting), chosen["columns"]).take(train)
            designs.append(standardize(chosen["scaler"], X))
        for model, features in chosen["models"].items():
            fits = [_fit_imputation(X.select(features), y, f"{setting} {model} imputation {k + 1}")
                    for k, X in enumerate(designs)]
            pooled_fit = rubin_pool(fits, len(fits))
            models[(setting, model)] = pooled_fit
            path = out / f"{setting}_{model}_coefficients.csv"
            write_table(pooled_fit.summary(), path)
            paths.append(path)
            rows.append({"setting": setting, "model": model, "n_features": len(features),
                         "pseudo_r2": pooled_fit.pseudo_r2})
            log_info(MODULE, f"{setting} {model}: {len(features)} features, pseudo-R2 {pooled_fit.pseudo_r2:.4f}")

    pooled = _read_frame(_stage_dir(cfg, "impute") / "pooled.csv", "impute")
    models[NEWS2] = glm.recalibrate(news2_frame(pooled.take(train)), _labels(pooled)[train], name=NEWS2)
    write_table(models[NEWS2].summary(), out / "news2_recalibration.csv")
    write_table(pd.DataFrame(rows, columns=["setting", "model", "n_features", "pseudo_r2"]),
                out / "model_summary.csv")
    dump_object(models, out / "models.pkl")
    return paths + [out / "news2_recalibration.csv", out / "model_summary.csv", out / "models.pkl"]


# === evaluate ===
def _tagged(df: pd.DataFrame, setting: str) -> pd.DataFrame:
    df = df.copy()
    df.insert(0, "setting", setting)
    return df


def stage_evaluate(cfg: RunConfig) -> list[Path]:
    models = load_object(_stage_dir(cfg, "fit") / "models.pkl", "fit")
    bundle = load_object(_stage_dir(cfg, "select") / "selection.pkl", "select")
    validation = bundle["validation"]
    pooled = _read_frame(_stage_dir(cfg, "impute") / "pooled.csv", "impute")
    y = _labels(pooled)[validation]
    news2 = news2_frame(pooled.take(validation))
    news2_lr = glm.predict_proba(models[NEWS2], FeatureMatrix(news2.astype(float), (NEWS2,)))

    out = _stage_dir(cfg, "evaluate")
    tables = {"roc": [], "calibration": [], "dca": [], "metrics": []}
    for setting, chosen in bundle["settings"].items():
        X = from_frame(_with_text(pooled, cfg, setting), chosen["columns"]).take(validation)
        Xs = standardize(chosen["scaler"], X)
        probabilities = {f"{NEWS2}-LR": news2_lr}
        for model in chosen["models"]:
            probabilities[f"{model}-LR"] = glm.predict_proba(models[(setting, model)], Xs)
        booster = gbt.loads(read_text(_stage_dir(cfg, "select") / f"{setting}_gbt.txt", "select"))
        probabilities[BOOSTED] = gbt.predict_proba(booster, Xs)

        report = evaluate_models(probabilities, y, cfg.eval, raw_scores={NEWS2: news2})
        for name in tables:
            tables[name].append(_tagged(getattr(report, name), setting))
        label = SETTING_LABEL[setting]
        plots.plot_roc(report.roc, {m: c.auc for m, c in report.curves.items()}, out / f"{setting}_roc.svg",
                       title=f"ROC ({label})")
        plots.plot_calibration(report.calibration, out / f"{setting}_calibration.svg",
                               title=f"Calibration ({label})")
        plots.plot_dca(report.dca, out / f"{setting}_dca.svg", title=f"Decision curve ({label})")

    for name, parts in tables.items():
        write_table(pd.concat(parts, ignore_index=True), out / f"{name}.csv")
    return sorted(out.iterdir())


# === report ===
def comparison_table(summary: pd.DataFrame) -> pd.DataFrame:
    """Model x feature source block of feature counts and pseudo-R2."""
    rows = []
    for model in MODELS:
        for setting in SETTINGS:
            hit = summary[(summary["model"] == model) & (summary["setting"] == setting)]
            if hit.empty:
                continue
            rows.append({"Model": model, "Feature Source": SETTING_LABEL[setting],
                         "# Features": int(hit["n_features"].iloc[0]), "Pseudo-R2": float(hit["pseudo_r2"].iloc[0])})
    return pd.DataFrame(rows, columns=["Model", "Feature Source", "# Features", "Pseudo-R2"])


def metrics_table(metrics: pd.DataFrame, model: str = "Combined-LR") -> pd.DataFrame:
    """Metric rows, one column per feature setting, for a single model."""
    out = pd.DataFrame({"Metric": ["AUC", "Accuracy", "F1", "Recall"]})
    for setting in SETTINGS:
        hit = metrics[(metrics["model"] == model) & (metrics["setting"] == setting)]
        if hit.empty:
            continue
        row = hit.iloc[0]
        out[SETTING_LABEL[setting]] = [row["auc"], row["accuracy"], row["f1_pos"], row["recall_pos"]]
    return out


def stage_report(cfg: RunConfig) -> list[Path]:
    summary = read_table(_stage_dir(cfg, "fit") / "model_summary.csv", "fit")
    metrics = read_table(_stage_dir(cfg, "evaluate") / "metrics.csv", "evaluate")
    if metrics.empty:
        raise IoFailure("metrics.csv", "no evaluated models")
    out = _stage_dir(cfg, "report")
    paths = [out / "comparison.csv", out / "metrics.csv", out / "all_metrics.csv"]
    write_table(comparison_table(summary), paths[0])
    write_table(metrics_table(metrics), paths[1])
    wide = metrics.pivot(index="model", columns="setting", values="auc")
    wide = wide.reindex(columns=[s for s in SETTINGS if s in wide.columns])
    wide.columns = [f"AUC {SETTING_LABEL[s]}" for s in wide.columns]
    write_table(wide.reset_index(), paths[2])
    for line in comparison_table(summary).itertuples(index=False):
        log_info(MODULE, f"{line[0]:<9} {line[1]:<18} {line[2]:>3} features  pseudo-R2 {line[3]:.4f}")
    return paths


STAGE_RUNNERS = {
    "synth": stage_synth, "cohort": stage_cohort, "features": stage_features, "impute": stage_impute,
    "text": stage_text, "select": stage_select, "fit": stage_fit, "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_stage(stage: str, cfg: RunConfig) -> list[Path]:
    if stage not in STAGE_RUNNERS:
        raise ValueError(f"unknown stage {stage!r}, expected one of {STAGES}")
    log_info(MODULE, f"===== {stage} =====")
    paths = STAGE_RUNNERS[stage](cfg)
    log_info(MODULE, f"{stage}: {len(paths)} artifacts under {cfg.paths.out_dir}")
    return paths


def run_all(cfg: RunConfig) -> list[Path]:
    paths = []
    for stage in STAGES:
        if stage == "synth" and cfg.paths.input_dir is not None:
            log_info(MODULE, f"reading tables from {cfg.paths.input_dir}, synth skipped")
            continue
        paths += run_stage(stage, cfg)
    return paths
