from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pipeline.errors import EvenWindow, LengthMismatch
from pipeline.eval_kpi import (
    ConfusionMatrix,
    Segment,
    class_accuracy_ranking,
    class_report,
    confusion_matrix,
    cycle_times,
    flatten_segments,
    grouped_accuracy,
    segment,
    smooth,
    temporal_profile,
    transition_error_share,
)

classes = st.integers(min_value=0, max_value=9)


def test_confusion_counts():
    cm = confusion_matrix([1, 1, 2], [1, 2, 2])
    assert cm.counts[1, 1] == 1 and cm.counts[2, 1] == 1 and cm.counts[2, 2] == 1
    assert cm.total == 3
    assert cm.accuracy == pytest.approx(2 / 3)
    perfect = confusion_matrix([0, 3, 3, 9], [0, 3, 3, 9])
    assert (perfect.counts == np.diag(np.diag(perfect.counts))).all()


def test_confusion_length_mismatch():
    with pytest.raises(LengthMismatch):
        confusion_matrix([1, 2], [1])


def test_class_report_f1_of_weak_class():
    counts = np.zeros((10, 10), dtype=np.int64)
    # class 0: 13 true positives, 7 false positives, 117 false negatives
    counts[0, 0] = 13
    counts[1, 0] = 7
    counts[0, 1] = 117
    report = class_report(ConfusionMatrix(counts))
    assert report.precision[0] == pytest.approx(0.65)
    assert report.recall[0] == pytest.approx(0.10)
    assert report.f1[0] == pytest.approx(0.1733, abs=1e-4)


def test_class_report_perfect_and_absent_classes():
    labels = [1, 1, 2, 5, 5, 5]
    report = class_report(confusion_matrix(labels, labels))
    assert report.support.tolist() == [0, 2, 1, 0, 0, 3, 0, 0, 0, 0]
    assert report.f1[[1, 2, 5]].tolist() == [1.0, 1.0, 1.0]
    assert report.precision[3] == 0.0 and report.recall[3] == 0.0
    assert report.degenerate[3] and not report.degenerate[5]
    assert list(report.to_frame().columns) == ["class_id", "precision", "recall", "f1", "support", "degenerate"]


def assert_matches_brute_force(predictions, labels):
    pairs = list(zip(predictions, labels))
    tally = Counter(pairs)
    cm = confusion_matrix(predictions, labels)
    for t in range(10):
        for p in range(10):
            assert cm.counts[t, p] == tally[(p, t)]
    assert cm.accuracy == sum(p == t for p, t in pairs) / len(pairs)
    report = class_report(cm)
    for c in range(10):
        tp = sum(p == c and t == c for p, t in pairs)
        predicted = sum(p == c for p in predictions)
        actual = sum(t == c for t in labels)
        precision = tp / predicted if predicted else 0.0
        recall = tp / actual if actual else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        assert report.support[c] == actual
        assert abs(report.precision[c] - precision) <= 1e-12
        assert abs(report.recall[c] - recall) <= 1e-12
        assert abs(report.f1[c] - f1) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(pairs=st.lists(st.tuples(classes, classes), min_size=1, max_size=80))
def test_class_report_matches_brute_force(pairs):
    assert_matches_brute_force([p for p, _ in pairs], [t for _, t in pairs])


@pytest.mark.slow
def test_class_report_matches_brute_force_on_long_sequences():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        labels = rng.integers(0, 10, 500)
        predictions = np.where(rng.random(500) < 0.7, labels, rng.integers(0, 10, 500))
        assert_matches_brute_force(predictions.tolist(), labels.tolist())


def test_grouped_accuracy():
    predictions = [1, 1, 2, 2]
    labels = [1, 1, 3, 3]
    assert grouped_accuracy(predictions, labels, ["a", "a", "b", "b"]) == {"a": 1.0, "b": 0.0}
    assert grouped_accuracy(predictions, labels, ["w"] * 4) == {"w": 0.5}
    with pytest.raises(LengthMismatch):
        grouped_accuracy(predictions, labels, ["a"])


@settings(max_examples=50, deadline=None)
@given(rows=st.lists(st.tuples(classes, classes, st.sampled_from(["w1", "w2", "w3"])), min_size=1, max_size=60))
def test_grouped_accuracy_weighted_mean_is_overall(rows):
    predictions, labels, groups = zip(*rows)
    by_group = grouped_accuracy(predictions, labels, groups)
    sizes = {g: groups.count(g) for g in by_group}
    weighted = sum(by_group[g] * sizes[g] for g in by_group) / len(rows)
    assert weighted == pytest.approx(confusion_matrix(predictions, labels).accuracy, abs=1e-12)


def test_temporal_profile_bins():
    labels = [3] * 20 + [4] * 20
    profile = temporal_profile(labels, labels)
    defined = profile.accuracy[~np.isnan(profile.accuracy)]
    assert (defined == 1.0).all()
    assert profile.counts[3].tolist() == [2] * 10
    predictions = list(labels)
    predictions[0] = predictions[1] = 9
    predictions[20] = predictions[21] = 9
    profile = temporal_profile(predictions, labels)
    for c in (3, 4):
        assert profile.accuracy[c, 0] == 0.0
        assert (profile.accuracy[c, 1:] == 1.0).all()


@settings(max_examples=50, deadline=None)
@given(pairs=st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=80))
def test_temporal_profile_partitions_segments(pairs):
    predictions = [p for p, _ in pairs]
    labels = [t for _, t in pairs]
    profile = temporal_profile(predictions, labels)
    report = class_report(confusion_matrix(predictions, labels))
    for c in range(4):
        counts = profile.counts[c]
        assert counts.sum() == labels.count(c)
        if counts.sum():
            weighted = np.nansum(profile.accuracy[c] * counts) / counts.sum()
            assert weighted == pytest.approx(report.recall[c], abs=1e-12)


def test_transition_share():
    labels = [1] * 50 + [2] * 50
    assert transition_error_share(labels, labels).share_near_transition == 0.0
    predictions = list(labels)
    predictions[50] = 1
    share = transition_error_share(predictions, labels, margin_frames=15)
    assert share.share_near_transition == 1.0
    assert share.adjacent_confusion_rate == 1.0
    assert share.errors == 1
    predictions = list(labels)
    predictions[10] = 7
    predictions[50] = 1
    share = transition_error_share(predictions, labels, margin_frames=15)
    assert share.share_near_transition == 0.5
    assert share.adjacent_confusion_rate == 0.5


def test_transition_margin_covering_everything():
    labels = [0] * 10 + [5] * 10
    predictions = [9] * 20
    assert transition_error_share(predictions, labels, margin_frames=20).share_near_transition == 1.0
    # no class change at all: nothing counts as near a transition
    assert transition_error_share([9] * 5, [0] * 5, margin_frames=100).share_near_transition == 0.0


def test_smooth_examples():
    assert smooth([1, 1, 2, 1, 1], 3).tolist() == [1, 1, 1, 1, 1]
    assert smooth([4] * 6, 5).tolist() == [4] * 6
    assert smooth([3, 1, 4, 1, 5], 1).tolist() == [3, 1, 4, 1, 5]
    # tie at the edge keeps the original prediction
    assert smooth([2, 7, 7], 3).tolist() == [2, 7, 7]
    for k in (0, 2, 4):
        with pytest.raises(EvenWindow):
            smooth([1, 2], k)


@settings(max_examples=50, deadline=None)
@given(runs=st.lists(st.tuples(classes, st.integers(min_value=3, max_value=8)), min_size=1, max_size=8))
def test_smooth_is_identity_on_long_runs(runs):
    sequence = [c for c, n in runs for _ in range(n)]
    assert smooth(sequence, 3).tolist() == sequence


def test_segment_examples():
    assert segment([1, 1, 2, 2, 2]) == [Segment(1, 0, 1), Segment(2, 2, 4)]
    assert segment([]) == []
    assert flatten_segments([]).tolist() == []


@settings(max_examples=100, deadline=None)
@given(sequence=st.lists(st.integers(0, 3), max_size=60))
def test_segment_round_trip(sequence):
    runs = segment(sequence)
    assert flatten_segments(runs).tolist() == sequence
    for a, b in zip(runs, runs[1:]):
        assert a.cls != b.cls and b.start == a.end + 1
    if runs:
        assert runs[0].start == 0 and runs[-1].end == len(sequence) - 1


def test_cycle_times():
    segments = [Segment(2, 0, 99), Segment(3, 100, 299), Segment(2, 300, 450), Segment(3, 451, 599),
                Segment(2, 600, 700)]
    assert cycle_times(segments, 2, 30) == [10.0, 10.0]
    assert cycle_times(segments[:2], 2, 30) == []
    with pytest.raises(ValueError):
        cycle_times(segments, 2, 0)


def test_class_accuracy_ranking():
    predictions = [5, 5, 1, 2, 2, 0]
    labels = [5, 5, 1, 1, 2, 2]
    ranking = class_accuracy_ranking(confusion_matrix(predictions, labels))
    assert [r["class_id"] for r in ranking[:2]] == [5, 1]
    assert ranking[0]["accuracy"] == 1.0 and ranking[0]["support"] == 2
