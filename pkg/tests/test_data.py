"""Ingest contract tests: parsing, cleaning, masking, cohort validation."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibemil import data
from vibemil.errors import (
    DuplicateRecording,
    DuplicateSubject,
    EmptyInput,
    ParseError,
    SchemaError,
    UnknownSubject,
)

META = json.dumps(
    {"subject_id": "S01", "day_index": 0, "feature_order": list(data.CANONICAL_FEATURES)}
)


def frame_line(values, voiced=True):
    return json.dumps({"v": values, "voiced": voiced})


def make_text(rows, voiced=None):
    voiced = voiced or [True] * len(rows)
    lines = [META] + [frame_line(r, v) for r, v in zip(rows, voiced)]
    return "\n".join(lines) + "\n"


class TestClean:
    def test_special_values_replaced(self):
        row = np.array([[math.nan, 3.2, math.inf, -math.inf] + [0.0] * 10])
        out = data.clean_frames(row)
        assert out[0, 0] == 0.0
        assert out[0, 1] == 3.2
        assert out[0, 2] == 1.0e5
        assert out[0, 3] == -1.0e5

    def test_finite_values_beyond_clip_kept(self):
        row = np.array([[2.0e5, -3.0e7]])
        out = data.clean_frames(row)
        assert out[0, 0] == 2.0e5
        assert out[0, 1] == -3.0e7

    def test_pure(self):
        row = np.array([[math.nan]])
        data.clean_frames(row)
        assert math.isnan(row[0, 0])

    @given(
        st.lists(
            st.floats(allow_nan=True, allow_infinity=True, width=64),
            min_size=1,
            max_size=40,
        )
    )
    def test_idempotent_and_finite(self, xs):
        arr = np.array(xs)
        once = data.clean_frames(arr)
        assert np.isfinite(once).all()
        assert np.array_equal(data.clean_frames(once), once)


class TestMask:
    def test_keeps_voiced_rows_in_order(self):
        rec = data.DayRecording(
            "S01",
            0,
            values=np.arange(42.0).reshape(3, 14),
            voiced=np.array([True, False, True]),
        )
        out = data.apply_voiced_mask(rec)
        assert out.shape == (2, 14)
        assert np.array_equal(out[0], np.arange(14.0))
        assert np.array_equal(out[1], np.arange(28.0, 42.0))

    def test_cleaning_happens_before_masking(self):
        # A voiced frame that is entirely NaN must survive as a zero row.
        values = np.full((2, 14), math.nan)
        values[1] = 1.0
        rec = data.DayRecording("S01", 0, values=values, voiced=np.array([True, True]))
        out = data.cleaned_voiced_matrix(rec)
        assert out.shape == (2, 14)
        assert np.array_equal(out[0], np.zeros(14))


class TestParse:
    def test_simple_file(self):
        rows = [[float(i + j) for j in range(14)] for i in range(3)]
        rec = data.parse_day_recording(make_text(rows, [True, False, True]))
        assert rec.subject_id == "S01"
        assert rec.day_index == 0
        assert rec.total_frame_count == 3
        assert np.array_equal(rec.values, np.array(rows))
        assert rec.voiced.tolist() == [True, False, True]

    def test_null_and_inf_tokens(self):
        rows = [[None, "inf", "-inf"] + [1.0] * 11]
        rec = data.parse_day_recording(make_text(rows))
        assert math.isnan(rec.values[0, 0])
        assert rec.values[0, 1] == math.inf
        assert rec.values[0, 2] == -math.inf

    def test_empty_input_rejected(self):
        with pytest.raises(ParseError):
            data.parse_day_recording("")
        with pytest.raises(ParseError):
            data.parse_day_recording("   \n  \n")

    def test_no_frames_rejected(self):
        with pytest.raises(SchemaError):
            data.parse_day_recording(META + "\n")

    def test_malformed_json_names_line(self):
        text = META + "\n" + frame_line([1.0] * 14) + "\n{oops\n"
        with pytest.raises(ParseError) as err:
            data.parse_day_recording(text)
        assert err.value.line_no == 3

    def test_wrong_arity_names_line(self):
        text = META + "\n" + frame_line([1.0] * 14) + "\n" + frame_line([1.0] * 13) + "\n"
        with pytest.raises(SchemaError) as err:
            data.parse_day_recording(text)
        assert err.value.line_no == 3

    def test_non_numeric_value_rejected(self):
        with pytest.raises(SchemaError):
            data.parse_day_recording(make_text([["x"] + [0.0] * 13]))

    def test_non_bool_voiced_rejected(self):
        with pytest.raises(SchemaError):
            data.parse_day_recording(make_text([[0.0] * 14], voiced=[1]))

    def test_wrong_feature_order_rejected(self):
        meta = json.dumps(
            {
                "subject_id": "S01",
                "day_index": 0,
                "feature_order": list(reversed(data.CANONICAL_FEATURES)),
            }
        )
        with pytest.raises(SchemaError):
            data.parse_day_recording(meta + "\n" + frame_line([0.0] * 14))

    def test_metadata_missing_key_rejected(self):
        meta = json.dumps({"subject_id": "S01", "day_index": 0})
        with pytest.raises(SchemaError):
            data.parse_day_recording(meta + "\n" + frame_line([0.0] * 14))

    def test_negative_day_index_rejected(self):
        meta = json.dumps(
            {"subject_id": "S01", "day_index": -1, "feature_order": list(data.CANONICAL_FEATURES)}
        )
        with pytest.raises(SchemaError):
            data.parse_day_recording(meta + "\n" + frame_line([0.0] * 14))


finite_floats = st.floats(
    allow_nan=False, allow_infinity=False, width=64, min_value=-1e9, max_value=1e9
)
cell = st.one_of(
    finite_floats,
    st.just(math.nan),
    st.just(math.inf),
    st.just(-math.inf),
)


class TestRoundTrip:
    @settings(max_examples=30, deadline=None)
    @given(
        st.lists(
            st.tuples(st.lists(cell, min_size=14, max_size=14), st.booleans()),
            min_size=1,
            max_size=8,
        )
    )
    def test_serialize_then_parse_is_identity(self, frames):
        values = np.array([f[0] for f in frames], dtype=np.float64)
        voiced = np.array([f[1] for f in frames], dtype=bool)
        rec = data.DayRecording("S09", 3, values=values, voiced=voiced)
        back = data.parse_day_recording(data.serialize_day_recording(rec))
        assert back.subject_id == rec.subject_id
        assert back.day_index == rec.day_index
        assert np.array_equal(back.voiced, rec.voiced)
        assert np.array_equal(back.values, rec.values, equal_nan=True)

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        rec = data.DayRecording(
            "S02", 1, values=rng.normal(size=(50, 14)), voiced=rng.random(50) < 0.5
        )
        path = tmp_path / data.day_file_name(rec.subject_id, rec.day_index)
        data.write_day_file(rec, path)
        back = data.read_day_file(path)
        assert np.array_equal(back.values, rec.values)
        assert np.array_equal(back.voiced, rec.voiced)


class TestLabels:
    def test_round_trip(self, tmp_path):
        labels = {"S01": "PVH", "S02": "NORMAL", "S03": "NPVH"}
        path = tmp_path / "labels.csv"
        data.write_labels(labels, path)
        assert data.read_labels(path) == labels

    def test_unknown_group_rejected(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("subject_id,group\nS01,WEIRD\n")
        with pytest.raises(SchemaError):
            data.read_labels(path)

    def test_duplicate_subject_rejected(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("subject_id,group\nS01,PVH\nS01,NORMAL\n")
        with pytest.raises(DuplicateSubject):
            data.read_labels(path)


def write_cohort(tmp_path, entries, labels):
    data.write_labels(labels, tmp_path / "labels.csv")
    rng = np.random.default_rng(0)
    for sid, day in entries:
        rec = data.DayRecording(
            sid, day, values=rng.normal(size=(5, 14)), voiced=np.ones(5, dtype=bool)
        )
        data.write_day_file(rec, tmp_path / data.day_file_name(sid, day))


class TestCohort:
    def test_load_and_validate(self, tmp_path):
        write_cohort(
            tmp_path,
            [("S01", 0), ("S01", 1), ("S02", 0)],
            {"S01": "PVH", "S02": "NORMAL"},
        )
        cohort = data.load_cohort(tmp_path)
        summary = data.validate_cohort(cohort)
        assert summary.n_subjects == 2
        assert summary.n_days == 3
        assert summary.group_counts == {"PVH": 1, "NPVH": 0, "NORMAL": 1}
        assert summary.days_per_subject == {"S01": 2, "S02": 1}

    def test_unlabeled_subject_rejected(self, tmp_path):
        write_cohort(tmp_path, [("S01", 0), ("S02", 0)], {"S01": "PVH"})
        with pytest.raises(UnknownSubject):
            data.load_cohort(tmp_path)

    def test_duplicate_recording_rejected(self, tmp_path):
        write_cohort(tmp_path, [("S01", 0)], {"S01": "PVH"})
        # Same (subject, day) under a different file name.
        rec = data.DayRecording(
            "S01", 0, values=np.zeros((5, 14)), voiced=np.ones(5, dtype=bool)
        )
        data.write_day_file(rec, tmp_path / "copy.ndjson")
        with pytest.raises(DuplicateRecording):
            data.load_cohort(tmp_path)

    def test_empty_dir_rejected(self, tmp_path):
        with pytest.raises(EmptyInput):
            data.load_cohort(tmp_path)
        data.write_labels({"S01": "PVH"}, tmp_path / "labels.csv")
        with pytest.raises(EmptyInput):
            data.load_cohort(tmp_path)
