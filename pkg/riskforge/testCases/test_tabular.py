import numpy as np
import pandas as pd
import pytest

from riskforge.lib.errors import IoFailure, KeyMissing, MissingColumn, NonNumericColumn
from riskforge.lib.tabular import JoinSpec, PatientFrame, aggregate_by_key, join, read_csv, write_csv
from conftest import frame_of


def _write(tmp_path, text, name="t.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_read_csv_masks_blank_and_unparseable_cells(tmp_path):
    path = _write(tmp_path, "subject_id,value,note\n1,2.5,a\n2,,b\n3,abc,\n")
    frame = read_csv(path, {"subject_id": "int", "value": "float", "note": "str"})
    assert frame.is_masked("value").tolist() == [False, True, True]
    assert frame.is_masked("note").tolist() == [False, False, True]
    assert frame.values("value")[0] == 2.5
    assert np.isnan(frame.values("value")[1:]).all()


def test_read_csv_missing_column_and_missing_file(tmp_path):
    path = _write(tmp_path, "subject_id\n1\n")
    with pytest.raises(MissingColumn) as info:
        read_csv(path, {"subject_id": "int", "hadm_id": "int"})
    assert info.value.name == "hadm_id"
    with pytest.raises(IoFailure):
        read_csv(tmp_path / "absent.csv", {"subject_id": "int"})


def test_time_columns_become_hours(tmp_path):
    path = _write(tmp_path, "t\n2150-01-01 00:00:00\n2150-01-01 06:30:00\n12.5\n")
    t = read_csv(path, {"t": "time"}).values("t")
    assert t[1] - t[0] == pytest.approx(6.5)
    assert t[2] == 12.5


def test_write_csv_keeps_mask_and_exact_floats(tmp_path):
    frame = PatientFrame(pd.DataFrame({"stay_id": [1.0, 2.0, 3.0], "x": [0.1 + 0.2, np.nan, 1e-300]}))
    write_csv(frame, tmp_path / "out.csv")
    back = read_csv(tmp_path / "out.csv", {"stay_id": "int", "x": "float"})
    assert back.is_masked("x").tolist() == [False, True, False]
    assert back.values("x")[0] == 0.1 + 0.2
    assert back.values("x")[2] == 1e-300
    assert back.equals(frame)


def test_zero_fill_is_not_missing():
    frame = frame_of({"stay_id": [1, 2], "x": [None, 3.0]})
    filled = frame.with_column("x", [0.0, 3.0], mask=[False, False])
    assert frame.masked_count("x") == 1
    assert filled.masked_count("x") == 0
    assert filled.values("x")[0] == 0.0


def test_with_column_length_mismatch():
    frame = frame_of({"stay_id": [1, 2]})
    with pytest.raises(ValueError):
        frame.with_column("x", [1.0])


def test_values_of_text_column_raises():
    frame = frame_of({"code": ["I46", "4275"]})
    with pytest.raises(NonNumericColumn):
        frame.values("code")


def test_left_join_masks_unmatched_rows_and_suffixes_collisions():
    left = frame_of({"stay_id": [1, 2, 3], "x": [1.0, 2.0, 3.0]})
    right = frame_of({"stay_id": [3, 1], "x": [30.0, 10.0], "y": [0.0, None]})
    out = join(left, right, JoinSpec(("stay_id",), "left"))
    assert out.columns == ["stay_id", "x", "x_r", "y"]
    assert out.values("stay_id").tolist() == [1, 2, 3]
    assert out.is_masked("x_r").tolist() == [False, True, False]
    np.testing.assert_array_equal(out.values("x_r")[[0, 2]], [10.0, 30.0])
    # matched but masked on the right stays masked; a matched zero does not
    assert out.is_masked("y").tolist() == [True, True, False]


def test_inner_join_keeps_left_order():
    left = frame_of({"hadm_id": [5, 3, 9], "a": [1.0, 2.0, 3.0]})
    right = frame_of({"hadm_id": [9, 5], "b": [90.0, 50.0]})
    out = join(left, right, JoinSpec("hadm_id"))
    assert out.values("hadm_id").tolist() == [5, 9]
    assert out.values("b").tolist() == [50.0, 90.0]


def test_join_requires_key_on_both_sides():
    with pytest.raises(KeyMissing):
        join(frame_of({"stay_id": [1]}), frame_of({"hadm_id": [1]}), JoinSpec("stay_id"))
    with pytest.raises(ValueError):
        JoinSpec(("charttime",))


def test_aggregate_by_key_matches_scan(rng):
    keys = rng.integers(0, 6, size=80).astype(float)
    x = rng.normal(size=80)
    x[rng.random(80) < 0.3] = np.nan
    frame = PatientFrame(pd.DataFrame({"stay_id": keys, "x": x}))
    out = aggregate_by_key(frame, "stay_id")
    for i, k in enumerate(out.values("stay_id")):
        cells = [v for kk, v in zip(keys, x) if kk == k and not np.isnan(v)]
        if not cells:
            assert out.is_masked("x_mean")[i]
            continue
        assert out.values("x_mean")[i] == pytest.approx(sum(cells) / len(cells), rel=1e-12)
        assert out.values("x_min")[i] == min(cells)
        assert out.values("x_max")[i] == max(cells)
    assert out.values("stay_id").tolist() == sorted(set(keys.tolist()))


def test_aggregate_by_key_rejects_text_column():
    frame = frame_of({"stay_id": [1, 1], "code": ["a", "b"]})
    with pytest.raises(NonNumericColumn):
        aggregate_by_key(frame, "stay_id")
