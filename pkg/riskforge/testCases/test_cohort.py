import pytest

from riskforge.cohort import CohortConfig, build_cohort, code_matches, first_icu_stay, label_mortality
from riskforge.lib.errors import EmptyCohort, MissingDischtime, MissingIntime
from conftest import frame_of, load_case

CASE = load_case("cohort_case.json")


def _tables():
    return [frame_of(CASE[name]) for name in ("diagnoses_icd", "patients", "icustays", "admissions")]


def test_build_cohort_case():
    result = build_cohort(*_tables(), CohortConfig())
    expected = CASE["expected"]
    assert result.frame.values("subject_id").tolist() == expected["subject_id"]
    assert result.frame.values("stay_id").tolist() == expected["stay_id"]
    assert result.frame.values("in_hospital_death").tolist() == expected["in_hospital_death"]
    assert [list(r) for r in result.flow.itertuples(index=False)] == expected["flow"]


def test_cohort_is_one_row_per_subject():
    frame = build_cohort(*_tables(), CohortConfig()).frame
    subjects = frame.values("subject_id").tolist()
    assert len(subjects) == len(set(subjects))


@pytest.mark.parametrize("code, pattern, hit", [
    ("I46.9", "I46", True),
    ("i462", "I46", True),
    ("I4690", "I46*", True),
    ("4275", "4275", True),
    ("427.5", "4275", True),
    ("42751", "4275", False),
    ("I10", "I46", False),
])
def test_code_matches(code, pattern, hit):
    assert code_matches(code, pattern) is hit


def test_min_age_is_inclusive():
    diagnoses, patients, stays, admissions = _tables()
    frame = build_cohort(diagnoses, patients, stays, admissions, CohortConfig(min_age=16)).frame
    assert 4 in frame.values("subject_id").tolist()


def test_empty_cohort_warns_unless_strict():
    tables = _tables()
    cfg = CohortConfig(icd_codes=("Z99",))
    assert len(build_cohort(*tables, cfg).frame) == 0
    with pytest.raises(EmptyCohort):
        build_cohort(*tables, cfg, strict=True)


def test_first_stay_requires_intime():
    stays = frame_of({"subject_id": [1, 1], "stay_id": [1, 2], "intime": [3.0, None]})
    with pytest.raises(MissingIntime):
        first_icu_stay(stays)


def test_first_stay_breaks_intime_ties_by_stay_id():
    stays = frame_of({"subject_id": [1, 1], "stay_id": [9, 4], "intime": [3.0, 3.0]})
    assert first_icu_stay(stays).values("stay_id").tolist() == [4]


def test_label_requires_dischtime():
    with pytest.raises(MissingDischtime):
        label_mortality(frame_of({"hadm_id": [1], "dischtime": [None], "deathtime": [None]}))


def test_death_at_discharge_counts_as_in_hospital():
    frame = label_mortality(frame_of({"hadm_id": [1, 2], "dischtime": [10.0, 10.0], "deathtime": [10.0, 11.0]}))
    assert frame.values("in_hospital_death").tolist() == [1, 0]


def test_cohort_config_rejects_empty_codes():
    with pytest.raises(ValueError):
        CohortConfig(icd_codes=(" ",))
