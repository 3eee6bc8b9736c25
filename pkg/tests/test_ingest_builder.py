import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pipeline.errors import (
    EmptyTable,
    EmptyVideo,
    HistoryBudgetExceeded,
    MalformedRow,
    NonDivisorRate,
    NonMonotonicFrameIndex,
    StreamTooShort,
    UnlabeledPrefix,
)
from pipeline.ingest_builder import (
    DataConfig,
    LabelTable,
    apply_labels,
    build_dataset,
    build_windows,
    emulate_fps,
    parse_label_file,
    parse_skeleton_file,
    split_train_val,
    write_label_file,
    write_skeleton_file,
)
from pipeline.preprocess import PreprocessConfig, PreprocessPipeline, SkeletonWindow
from tests.helpers import make_row, make_stream, write_rows


def test_parse_well_formed_file(tmp_path):
    rows = [make_row(frame_index=i, label=i) for i in range(3)]
    streams = parse_skeleton_file(write_rows(rows, tmp_path / "frames.csv"))
    assert len(streams) == 1
    stream = streams[0]
    np.testing.assert_array_equal(stream.frame_index, [0, 1, 2])
    np.testing.assert_array_equal(stream.labels, [0, 1, 2])
    assert stream.present.all()


def test_parse_groups_videos_in_order_of_appearance(tmp_path):
    rows = [
        make_row(video_id="b", worker_id="w2", frame_index=0),
        make_row(video_id="a", worker_id="w1", frame_index=0),
        make_row(video_id="b", worker_id="w2", frame_index=1),
    ]
    streams = parse_skeleton_file(write_rows(rows, tmp_path / "frames.csv"))
    assert [s.video_id for s in streams] == ["b", "a"]
    assert len(streams[0]) == 2


def test_parse_absent_slot(tmp_path):
    rows = [make_row(slots=(None, ("Right", 0.7)), label=None)]
    stream = parse_skeleton_file(write_rows(rows, tmp_path / "frames.csv"))[0]
    assert stream.present.tolist() == [[False, True]]
    assert np.isnan(stream.coords[0, 0]).all()
    assert stream.handedness.tolist() == [[-1, 1]]
    assert not stream.is_labeled


def test_partially_missing_slot_is_malformed_row(tmp_path):
    rows = [make_row(frame_index=0), make_row(frame_index=1)]
    rows[1]["s0_z5"] = ""
    with pytest.raises(MalformedRow) as info:
        parse_skeleton_file(write_rows(rows, tmp_path / "frames.csv"))
    assert info.value.line == 3


def test_non_numeric_field(tmp_path):
    rows = [make_row()]
    rows[0]["s1_x2"] = "abc"
    with pytest.raises(MalformedRow, match="not a number"):
        parse_skeleton_file(write_rows(rows, tmp_path / "frames.csv"))


def test_undecodable_bytes_are_malformed_row(tmp_path):
    path = write_rows([make_row(frame_index=i) for i in range(3)], tmp_path / "frames.csv")
    lines = (tmp_path / "frames.csv").read_bytes().split(b"\n")
    lines[2] = lines[2].replace(b"v1", b"v\xff", 1)
    (tmp_path / "frames.csv").write_bytes(b"\n".join(lines))
    with pytest.raises(MalformedRow, match="UTF-8") as info:
        parse_skeleton_file(path)
    assert info.value.line == 3
    with pytest.raises(MalformedRow, match="UTF-8"):
        parse_skeleton_file(io.BytesIO(b"video_id\nv\xff\n"))


def test_bad_header():
    with pytest.raises(MalformedRow) as info:
        parse_skeleton_file(io.StringIO("video_id,frame_index\nv1,0\n"))
    assert info.value.line == 1
    with pytest.raises(MalformedRow):
        parse_skeleton_file(io.StringIO(""))


def test_repeated_frame_index(tmp_path):
    rows = [make_row(frame_index=5), make_row(frame_index=5)]
    with pytest.raises(NonMonotonicFrameIndex) as info:
        parse_skeleton_file(write_rows(rows, tmp_path / "frames.csv"))
    assert info.value.line == 3


def test_write_then_parse_keeps_values(tmp_path):
    stream = make_stream(5, dropout=0.3, seed=3)
    path = str(tmp_path / "frames.csv")
    write_skeleton_file([stream], path)
    parsed = parse_skeleton_file(path)[0]
    np.testing.assert_array_equal(parsed.present, stream.present)
    np.testing.assert_array_equal(parsed.labels, stream.labels)
    np.testing.assert_allclose(parsed.coords, stream.coords, atol=1e-6)


def test_label_file_round_trip(tmp_path):
    table = LabelTable(entries=[(0, 1), (300, 2), (450, 0)])
    path = str(tmp_path / "labels.csv")
    write_label_file(table, path)
    assert parse_label_file(path) == table


def test_label_file_must_increase():
    with pytest.raises(MalformedRow, match="strictly increasing"):
        parse_label_file(io.StringIO("start_frame,class_id\n10,1\n10,2\n"))
    with pytest.raises(MalformedRow):
        parse_label_file(io.StringIO("start_frame,class_id\n0,12\n"))


def test_apply_labels_step_function():
    stream = make_stream(400)
    labeled = apply_labels(stream, LabelTable(entries=[(0, 1), (300, 2)]))
    assert labeled.labels[299] == 1
    assert labeled.labels[300] == 2
    assert LabelTable.from_labels(labeled.frame_index, labeled.labels).entries == [(0, 1), (300, 2)]


def test_apply_labels_errors():
    stream = make_stream(60)
    with pytest.raises(UnlabeledPrefix, match="frame 0"):
        apply_labels(stream, LabelTable(entries=[(50, 3)]))
    with pytest.raises(EmptyTable):
        apply_labels(stream, LabelTable(entries=[]))


def test_emulate_fps():
    stream = make_stream(100)
    assert emulate_fps(stream, 30) is stream
    ten = emulate_fps(stream, 10)
    assert len(ten) == math.ceil(100 / 3)
    np.testing.assert_array_equal(ten.frame_index[:4], [0, 3, 6, 9])
    with pytest.raises(NonDivisorRate):
        emulate_fps(stream, 7)


def test_split_train_val():
    (split,) = split_train_val([make_stream(1000)], 0.8)
    assert split.boundary == 800
    assert split.train.frame_index[-1] == 799
    assert split.val.frame_index[0] == 800
    assert len(split.val) == 200


def test_split_ratio_one_warns(caplog):
    (split,) = split_train_val([make_stream(10)], 1.0)
    assert len(split.val) == 0
    assert "validation set empty" in caplog.text


def test_split_rejects_empty_video():
    with pytest.raises(EmptyVideo):
        split_train_val([make_stream(5).take(slice(0, 0))])


def test_build_windows_counts_and_history():
    assert len(build_windows(make_stream(106), 104)) == 3
    assert len(build_windows(make_stream(106), 104, max_history_s=3.5)) == 3
    assert len(build_windows(make_stream(20), 4, hop=3)) == 6
    with pytest.raises(HistoryBudgetExceeded):
        build_windows(make_stream(200), 120, max_history_s=3.5)
    with pytest.raises(StreamTooShort):
        build_windows(make_stream(10), 11)


@settings(max_examples=100, deadline=None)
@given(
    n=st.integers(min_value=1, max_value=40),
    window=st.integers(min_value=1, max_value=12),
    hop=st.integers(min_value=1, max_value=5),
    seed=st.integers(min_value=0, max_value=2 ** 16),
)
def test_windows_equal_naive_slices(n, window, hop, seed):
    stream = make_stream(n, seed=seed, dropout=0.2)
    if n < window:
        with pytest.raises(StreamTooShort):
            build_windows(stream, window, hop)
        return
    instances = build_windows(stream, window, hop)
    ends = list(range(window - 1, n, hop))
    assert len(instances) == len(ends)
    features, _ = instances.batch(np.arange(len(instances)))
    flat = stream.coords.reshape(n, -1).astype(np.float32)
    for i, end in enumerate(ends):
        np.testing.assert_array_equal(features[i], flat[end - window + 1:end + 1])
        assert instances.labels[i] == stream.labels[end]
        assert instances.end_frames[i] == end


def test_preprocessed_windows_equal_per_window_pipeline():
    stream = make_stream(30, seed=4, dropout=0.3)
    pipeline = PreprocessPipeline(PreprocessConfig(normalize="on_most_recent"))
    instances = build_windows(stream, 8, hop=2).preprocessed(pipeline)
    features, imputed = instances.batch(np.arange(len(instances)))
    for i, end in enumerate(range(7, 30, 2)):
        window = SkeletonWindow.from_stream(stream.take(slice(end - 7, end + 1)))
        expected = PreprocessPipeline(pipeline.config).apply(window)
        np.testing.assert_allclose(features[i], expected.features().astype(np.float32), rtol=0, atol=1e-6)
        np.testing.assert_array_equal(imputed[i], expected.imputed)


def test_window_record():
    stream = make_stream(12, video_id="v7", worker_id="w7")
    window = build_windows(stream, 5).window(2)
    assert window.features.shape == (5, 126)
    assert window.end_frame == 6
    assert window.label == stream.labels[6]
    assert (window.video_id, window.worker_id) == ("v7", "w7")


def test_build_dataset_protocol():
    streams = [make_stream(100, f"v{i}", f"w{i}", seed=i) for i in range(1, 4)]
    config = DataConfig(fps=30, window_len=10, hop=2, holdout_workers=["w3"])
    split = build_dataset(streams, config)
    assert set(split.holdout.worker_ids) == {"w3"}
    assert "w3" not in set(split.train.worker_ids) | set(split.val.worker_ids)
    assert (split.train.end_frames < 80).all()
    assert (split.val.end_frames >= 80).all()
    # hop applies to training windows only
    assert len(split.train) == 2 * len(range(9, 80, 2))
    assert len(split.val) == 2 * 20
    assert len(split.holdout) == 91


def test_build_dataset_emulates_fps_before_split():
    streams = [make_stream(90, "v1", "w1")]
    split = build_dataset(streams, DataConfig(fps=10, window_len=5, holdout_workers=[]))
    # 30 kept frames, boundary at 24
    assert (split.train.end_frames % 3 == 0).all()
    assert split.val.end_frames.min() == 72
    assert len(split.holdout) == 0


def test_build_dataset_requires_labels():
    stream = make_stream(20).with_labels(np.full(20, -1))
    with pytest.raises(UnlabeledPrefix):
        build_dataset([stream], DataConfig(window_len=5))
