import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pipeline.errors import (
    InvalidHandedness,
    LabelOutOfRange,
    MixedMissingness,
    NonFiniteCoordinate,
    ScoreOutOfRange,
    SkeletonError,
)
from pipeline.skeleton_model import (
    FRAME_COLUMNS,
    FrameStream,
    MotionClass,
    check_label,
    flatten,
    serialize_frame,
    validate_frame,
)
from tests.helpers import make_row, slot_points


def test_frame_columns_layout():
    assert FRAME_COLUMNS[:3] == ["video_id", "worker_id", "frame_index"]
    assert FRAME_COLUMNS[-1] == "label"
    # 3 ids + 2 x (4 slot fields + 63 coordinates) + label
    assert len(FRAME_COLUMNS) == 3 + 2 * (4 + 63) + 1
    assert "s1_z20" in FRAME_COLUMNS


def test_valid_frame_with_both_slots():
    record = validate_frame(make_row(label=5))
    assert record.label == 5
    assert record.slots[0].handedness_label == "Left"
    assert record.slots[1].handedness_score == 0.8
    np.testing.assert_array_equal(record.slots[0].points(), slot_points(0.5))
    assert MotionClass(record.label) == MotionClass.MC5


def test_empty_label_means_unlabeled():
    assert validate_frame(make_row(label=None)).label is None


def test_partially_missing_slot_rejected():
    row = make_row()
    row["s0_x7"] = ""
    with pytest.raises(MixedMissingness, match="1 of 63"):
        validate_frame(row)


def test_present_flag_must_agree_with_coordinates():
    row = make_row(slots=(("Left", 0.9), None))
    row["s1_present"] = 1
    with pytest.raises(MixedMissingness):
        validate_frame(row)
    row = make_row()
    row["s0_present"] = 0
    with pytest.raises(MixedMissingness):
        validate_frame(row)


@pytest.mark.parametrize("label", [10, -1, 2.5, "11"])
def test_label_out_of_range(label):
    with pytest.raises(LabelOutOfRange):
        validate_frame(make_row(label=label))


def test_check_label_accepts_text_and_blank():
    assert check_label("7") == 7
    assert check_label(" ") is None
    assert check_label(None) is None


@pytest.mark.parametrize("field,value", [("s0_hand_score", 1.5), ("s1_det_score", -0.1), ("s0_hand_score", "")])
def test_scores_outside_unit_interval(field, value):
    row = make_row()
    row[field] = value
    with pytest.raises(ScoreOutOfRange):
        validate_frame(row)


def test_non_finite_coordinate():
    row = make_row()
    row["s1_y3"] = math.inf
    with pytest.raises(NonFiniteCoordinate):
        validate_frame(row)


def test_unknown_handedness():
    row = make_row()
    row["s0_handedness"] = "Both"
    with pytest.raises(InvalidHandedness):
        validate_frame(row)


def test_missing_ids_and_bad_frame_index():
    with pytest.raises(SkeletonError):
        validate_frame(make_row(video_id=""))
    with pytest.raises(SkeletonError):
        validate_frame(make_row(frame_index=-3))
    with pytest.raises(SkeletonError):
        validate_frame(make_row(frame_index="x"))


def test_out_of_frame_coordinates_are_accepted(caplog):
    row = make_row()
    row["s0_x0"] = 1.25
    record = validate_frame(row)
    assert record.slots[0].landmarks[0].x == 1.25
    assert "outside [0, 1]" in caplog.text


def test_flatten_full_layout():
    vector = flatten(validate_frame(make_row()))
    assert len(vector) == 126
    assert vector.points_per_hand == 21
    np.testing.assert_array_equal(vector.values[:63], slot_points(0.5).reshape(-1))
    np.testing.assert_array_equal(vector.values[63:], slot_points(0.625).reshape(-1))


def test_flatten_absent_slot_is_missing():
    vector = flatten(validate_frame(make_row(slots=(("Left", 0.9), None))))
    assert np.isnan(vector.values[63:]).all()
    assert np.isfinite(vector.values[:63]).all()


def test_flatten_reduced_layouts():
    record = validate_frame(make_row())
    cog = flatten(record, "center_of_gravity")
    assert len(cog) == 6
    np.testing.assert_allclose(cog.values[:3], slot_points(0.5).mean(axis=0))
    five = flatten(record, "five_points")
    assert len(five) == 30
    np.testing.assert_array_equal(five.values[3:6], slot_points(0.5)[4])


def test_serialize_then_validate_is_identity():
    record = validate_frame(make_row(slots=(None, ("Right", 0.7)), label=3))
    assert validate_frame(serialize_frame(record)) == record


def test_stream_from_records_and_back():
    records = [validate_frame(make_row(frame_index=i, label=i % 10)) for i in range(4)]
    stream = FrameStream.from_records(records)
    assert len(stream) == 4
    assert stream.is_labeled
    assert list(stream.records()) == records
    assert stream.checksum() == FrameStream.from_records(records).checksum()


def test_stream_take_keeps_alignment():
    records = [validate_frame(make_row(frame_index=i, label=i)) for i in range(6)]
    stream = FrameStream.from_records(records).take(slice(2, 5))
    np.testing.assert_array_equal(stream.frame_index, [2, 3, 4])
    np.testing.assert_array_equal(stream.labels, [2, 3, 4])


@settings(max_examples=50, deadline=None)
@given(missing=st.integers(min_value=1, max_value=62))
def test_any_partial_slot_is_rejected(missing):
    row = make_row()
    for column in [c for c in FRAME_COLUMNS if c.startswith("s1_") and c[3] in "xyz"][:missing]:
        row[column] = ""
    with pytest.raises(MixedMissingness):
        validate_frame(row)
