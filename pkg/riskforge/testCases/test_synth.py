import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from riskforge.cohort import CohortConfig, build_cohort
from riskforge.lib.errors import InfeasiblePrevalence
from riskforge.lib.tabular import PatientFrame
from riskforge.synth import (HADM_BASE, STAY_BASE, SynthConfig, filler_vocabulary, generate, solve_intercept,
                             write_tables)
from riskforge.text_features import STOPWORDS


def test_generation_is_seeded():
    cfg = SynthConfig(n_patients=200, seed=3)
    first, second = generate(cfg), generate(cfg)
    assert first.tables.keys() == second.tables.keys()
    for name in first.tables:
        pd.testing.assert_frame_equal(first.tables[name], second.tables[name])
    np.testing.assert_array_equal(first.truth.outcome, second.truth.outcome)
    assert not np.array_equal(first.truth.outcome, generate(SynthConfig(n_patients=200, seed=4)).truth.outcome)


def test_intercept_hits_the_target_prevalence():
    result = generate(SynthConfig(n_patients=2000, seed=1))
    truth = result.truth
    assert np.mean(expit(truth.linear_predictor)) == pytest.approx(0.52, abs=1e-9)
    assert truth.prevalence == pytest.approx(0.52, abs=0.05)
    assert 0.5 < truth.bayes_auc < 1.0
    assert set(truth.informative) == set(truth.beta)


def test_solve_intercept():
    assert solve_intercept(np.zeros(10), 0.25) == pytest.approx(-np.log(3.0), abs=1e-9)
    with pytest.raises(InfeasiblePrevalence):
        solve_intercept(np.full(10, 100.0), 0.5)


def test_cohort_filters_reject_the_distractors():
    result = generate(SynthConfig(n_patients=300, seed=2))
    t = {name: PatientFrame(result.tables[name]) for name in ("diagnoses_icd", "patients", "icustays", "admissions")}
    frame = build_cohort(t["diagnoses_icd"], t["patients"], t["icustays"], t["admissions"], CohortConfig()).frame
    stays = frame.values("stay_id").astype(int)
    assert sorted(stays.tolist()) == (STAY_BASE + np.arange(300)).tolist()
    labels = dict(zip(stays.tolist(), frame.values("in_hospital_death").astype(int).tolist()))
    assert [labels[STAY_BASE + i] for i in range(300)] == result.truth.outcome.tolist()
    assert set(frame.values("hadm_id").astype(int)) == set((HADM_BASE + np.arange(300)).tolist())


def test_write_tables(tmp_path):
    result = generate(SynthConfig(n_patients=50, seed=0))
    written = write_tables(result, tmp_path)
    names = {p.name for p in written}
    assert {"chartevents.csv", "discharge.csv", "discharge_emb.csv", "ground_truth.csv"} <= names
    assert all(p.exists() for p in written)
    truth = pd.read_csv(tmp_path / "ground_truth.csv")
    assert truth.loc[truth["name"] == "Lactate", "value"].item() == pytest.approx(0.6)


def test_filler_vocabulary_avoids_stopwords():
    vocab = filler_vocabulary()
    assert len(vocab) == len(set(vocab)) == 400
    assert not set(vocab) & STOPWORDS


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_patients=5)
    with pytest.raises(ValueError):
        SynthConfig(true_beta={"Troponin": 1.0})
    with pytest.raises(ValueError):
        SynthConfig(missing_rates={"BT": 1.5})
