import logging

import numpy as np
import pandas as pd
import pytest

from riskforge import cli
from riskforge.cli import EXIT_ERROR, EXIT_OK, main
from riskforge.lib.config import validate_config
from riskforge.lib.errors import MissingArtifact
from riskforge.pipeline import STAGES, comparison_table, metrics_table, run_all, run_stage

SMALL_RUN = """
[lasso]
folds = 5
grid_size = 30

[gbt]
n_trees = 30

[synth]
n_patients = {n}

[run]
log_dir = {logs}
"""


def _config(tmp_path, name="run", n=300):
    path = tmp_path / f"{name}.ini"
    path.write_text(SMALL_RUN.format(n=n, logs=tmp_path / "logs"), encoding="utf-8")
    return validate_config(path, out_dir=tmp_path / name)


def test_evaluate_before_fit_names_the_missing_stage(tmp_path):
    with pytest.raises(MissingArtifact) as info:
        run_stage("evaluate", validate_config(None, out_dir=tmp_path))
    assert info.value.name == "fit"
    with pytest.raises(ValueError):
        run_stage("train", validate_config(None, out_dir=tmp_path))


def test_comparison_and_metrics_layout():
    summary = pd.DataFrame({"setting": ["structured", "multimodal", "structured"], "model": ["LASSO", "LASSO", "GBT"],
                            "n_features": [12, 30, 9], "pseudo_r2": [0.21, 0.34, 0.18]})
    table = comparison_table(summary)
    assert table.columns.tolist() == ["Model", "Feature Source", "# Features", "Pseudo-R2"]
    assert table["Feature Source"].tolist() == ["Structured only", "Structured + Text", "Structured only"]
    assert table["Model"].tolist() == ["LASSO", "LASSO", "GBT"]

    metrics = pd.DataFrame({"setting": ["structured", "multimodal"], "model": ["Combined-LR", "Combined-LR"],
                            "auc": [0.8, 0.9], "accuracy": [0.7, 0.8], "f1_pos": [0.6, 0.7],
                            "recall_pos": [0.5, 0.6]})
    out = metrics_table(metrics)
    assert out.columns.tolist() == ["Metric", "Structured only", "Structured + Text"]
    assert out["Structured + Text"].tolist() == [0.9, 0.8, 0.7, 0.6]


def test_cli_exit_codes(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text(f"[run]\nlog_dir = {tmp_path / 'logs'}\n", encoding="utf-8")
    assert main(["validate", "--config", str(ini)]) == EXIT_OK
    assert "[lasso]" in capsys.readouterr().out
    assert main(["evaluate", "--config", str(ini), "--out", str(tmp_path / "empty")]) == EXIT_ERROR
    bad = tmp_path / "bad.ini"
    bad.write_text("[text]\nsvd_target = 1.5\n", encoding="utf-8")
    assert main(["validate", "--config", str(bad)]) == EXIT_ERROR
    with pytest.raises(SystemExit):
        main(["train"])


def test_cli_reports_bad_values_with_exit_status(tmp_path, monkeypatch, caplog):
    ini = tmp_path / "run.ini"
    ini.write_text(f"[run]\nlog_dir = {tmp_path / 'logs'}\n", encoding="utf-8")

    def broken(stage, cfg):
        raise ValueError("chained equations need at least two numeric columns")

    monkeypatch.setattr(cli, "run_stage", broken)
    caplog.set_level(logging.ERROR, logger="cli")
    assert main(["impute", "--config", str(ini), "--out", str(tmp_path / "run")]) == EXIT_ERROR
    assert any("impute failed" in r.getMessage() for r in caplog.records)


def _artifacts(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.suffix != ".pkl"}


@pytest.mark.slow
def test_rerun_is_byte_identical(tmp_path):
    first, second = _config(tmp_path, "first"), _config(tmp_path, "second")
    run_all(first)
    run_all(second)
    a, b = _artifacts(first.paths.out_dir), _artifacts(second.paths.out_dir)
    assert a.keys() == b.keys()
    assert [name for name in a if a[name] != b[name]] == []
    for stage in STAGES:
        assert (first.paths.out_dir / stage).is_dir()
    report = pd.read_csv(first.paths.out_dir / "report" / "comparison.csv")
    assert set(report["Model"]) <= {"LASSO", "GBT", "Combined"}


@pytest.mark.slow
def test_text_features_lift_discrimination(tmp_path):
    cfg = _config(tmp_path, "lift", n=2000)
    run_all(cfg)
    metrics = pd.read_csv(cfg.paths.out_dir / "evaluate" / "metrics.csv")
    auc = metrics[metrics["model"] == "Combined-LR"].set_index("setting")["auc"]
    assert auc["multimodal"] - auc["structured"] > 0.02
    news2 = metrics[metrics["model"] == "NEWS2"]["auc"].to_numpy()
    assert np.all(news2 < auc["structured"])
