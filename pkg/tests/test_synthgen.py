import json
import math
import os

import numpy as np
import pandas as pd
import pytest

from pipeline.errors import InvalidSpec
from pipeline.eval_kpi import cycle_times, segment
from pipeline.ingest_builder import apply_labels, parse_label_file, parse_skeleton_file
from pipeline.preprocess import SkeletonWindow, swap_hands
from pipeline.synthgen import SynthSpec, describe, generate, write_dataset
from tests.conftest import SMALL_SPEC


def test_schema_and_gapless_indices(small_output):
    assert [s.worker_id for s in small_output.streams] == ["w1", "w2", "w3"]
    for stream in small_output.streams:
        assert len(stream) == 450
        np.testing.assert_array_equal(stream.frame_index, np.arange(450))
        assert stream.is_labeled
        assert set(np.unique(stream.handedness[stream.present])) <= {0, 1}
        assert np.isnan(stream.coords[~stream.present]).all()
        assert np.isfinite(stream.coords[stream.present]).all()


def test_no_dropout_means_no_absent_slots():
    output = generate(SMALL_SPEC.model_copy(update={"dropout_prob": 0.0}), seed=1)
    assert all(stream.present.all() for stream in output.streams)


def test_dropout_rate_within_binomial_interval(small_output):
    present = np.concatenate([s.present.reshape(-1) for s in small_output.streams])
    rate = 1 - present.mean()
    sigma = math.sqrt(SMALL_SPEC.dropout_prob * (1 - SMALL_SPEC.dropout_prob) / present.size)
    assert abs(rate - SMALL_SPEC.dropout_prob) <= 3 * sigma


def test_same_seed_gives_identical_files(tmp_path):
    written = []
    for name in ("a", "b"):
        output = generate(SMALL_SPEC, seed=11)
        written.append(write_dataset(output, SMALL_SPEC, 11, str(tmp_path / name)))
    for first, second in zip(*written):
        assert os.path.basename(first) == os.path.basename(second)
        with open(first, "rb") as a, open(second, "rb") as b:
            assert a.read() == b.read()


def test_written_dataset_parses_back(small_data_dir, small_output):
    for stream in small_output.streams:
        parsed = parse_skeleton_file(os.path.join(small_data_dir, "frames", f"{stream.video_id}.csv"))[0]
        np.testing.assert_array_equal(parsed.present, stream.present)
        np.testing.assert_array_equal(parsed.labels, stream.labels)
        table = parse_label_file(os.path.join(small_data_dir, "labels", f"{stream.video_id}.csv"))
        assert table == small_output.label_tables[stream.video_id]
    with open(os.path.join(small_data_dir, "synth_spec.json")) as handle:
        saved = json.load(handle)
    assert saved["seed"] == 7
    assert SynthSpec.model_validate(saved["spec"]) == SMALL_SPEC


def test_label_tables_reproduce_embedded_labels(small_output):
    for stream in small_output.streams:
        relabeled = apply_labels(stream, small_output.label_tables[stream.video_id])
        np.testing.assert_array_equal(relabeled.labels, stream.labels)


def test_worker_streams_are_distinct(small_output):
    checksums = {stream.checksum() for stream in small_output.streams}
    assert len(checksums) == len(small_output.streams)


def test_ground_truth_cycles_match_labels(small_output):
    for stream in small_output.streams:
        expected = small_output.cycles.loc[small_output.cycles.worker_id == stream.worker_id, "duration_s"]
        measured = cycle_times(segment(stream.labels), SMALL_SPEC.cycle_grammar[0], SMALL_SPEC.fps)
        assert len(measured) == len(expected)
        np.testing.assert_allclose(measured, expected.to_numpy(), atol=1 / SMALL_SPEC.fps)


def test_ground_truth_segments_cover_each_stream(small_output):
    for stream in small_output.streams:
        rows = small_output.segments[small_output.segments.worker_id == stream.worker_id]
        assert rows.start_frame.iloc[0] == 0
        assert rows.end_frame.iloc[-1] == len(stream) - 1
        assert (rows.start_frame.to_numpy()[1:] == rows.end_frame.to_numpy()[:-1] + 1).all()


def test_describe_matches_long_run():
    spec = SynthSpec(n_workers=30, minutes_per_worker=3.0, sloppy_workers=[], holdout_worker=None)
    stats = describe(spec)
    assert stats.frames_per_worker == 5400
    means = stats.mean_segment_s
    grammar_total = sum(means[c] for c in spec.cycle_grammar)
    assert stats.expected_cycle_s == pytest.approx(grammar_total + spec.error_prob * 15 * means[0])

    segments = generate(spec, seed=5).segments
    complete = segments[~segments.truncated]
    for cls in (3, 5):
        empirical = complete.loc[complete.class_id == cls, "duration_s"].mean()
        assert empirical == pytest.approx(means[cls], rel=0.05)


def test_classes_are_separable_by_nearest_centroid():
    spec = SynthSpec(n_workers=3, minutes_per_worker=1.0, sloppy_workers=[], holdout_worker=None)
    output = generate(spec, seed=2)

    def window_means(stream):
        canonical = swap_hands(SkeletonWindow.from_stream(stream))
        centers = np.nanmean(canonical.coords, axis=2).reshape(len(stream), -1)   # (N, 6)
        means = pd.DataFrame(centers).rolling(5, center=True, min_periods=1).mean()
        return means.fillna(means.mean()).to_numpy()

    train = [window_means(s) for s in output.streams[:2]]
    labels = np.concatenate([s.labels for s in output.streams[:2]])
    features = np.concatenate(train)
    centroids = np.stack([features[labels == c].mean(axis=0) for c in range(10)])

    test_stream = output.streams[2]
    test = window_means(test_stream)
    distances = ((test[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    accuracy = np.mean(distances.argmin(axis=1) == test_stream.labels)
    assert accuracy >= 0.9


@pytest.mark.parametrize("grammar", [[], [3], [1, 1, 2], [0, 1, 2], [1, 2, 1]])
def test_invalid_grammar(grammar):
    with pytest.raises(InvalidSpec):
        generate(SMALL_SPEC.model_copy(update={"cycle_grammar": grammar}), seed=0)
