import json
import os

import numpy as np
import pandas as pd
import pytest

from pipeline.reports import (
    FramePredictions,
    build_report,
    plot_parallel_coordinates,
    plot_search_trials,
    plot_training_curves,
    search_sensitivity,
    write_report,
    write_search_report,
)


def two_videos():
    labels = np.array([1] * 30 + [2] * 30 + [1] * 30 + [2] * 30)
    predicted = labels.copy()
    predicted[30:33] = 1        # late switch at the first transition
    predicted[100] = 7
    return FramePredictions(
        video_id=np.array(["v1"] * 60 + ["v2"] * 60, dtype=object),
        worker_id=np.array(["w1"] * 60 + ["w2"] * 60, dtype=object),
        frame=np.concatenate([np.arange(60), np.arange(60)]),
        predicted=predicted,
        label=labels,
    )


def test_report_tables_and_summary():
    bundle = build_report(two_videos(), fps=30, anchor_class=1, margin_frames=5)
    assert set(bundle.tables) == {"class_report", "confusion_matrix", "worker_accuracy", "temporal_profile",
                                  "transitions", "cycle_times", "predictions"}
    summary = bundle.summary
    assert summary["frames"] == 120
    assert summary["accuracy"] == pytest.approx(116 / 120)
    assert summary["worker_accuracy"] == {"w1": pytest.approx(57 / 60), "w2": pytest.approx(59 / 60)}
    assert summary["cycle"]["anchor_class"] == 1
    # errors at 30..32 sit within 5 frames of a change; frame 100 does not
    assert summary["transition"]["share_near_transition"] == pytest.approx(0.75)
    assert summary["transition"]["adjacent_confusion_rate"] == pytest.approx(0.75)
    transitions = bundle.tables["transitions"].set_index("video_id")
    assert transitions.loc["v1", "errors"] == 3


def test_video_boundary_is_not_a_transition():
    labels = np.array([1] * 20 + [2] * 20)
    predicted = labels.copy()
    predicted[22] = 1
    frames = FramePredictions(
        video_id=np.array(["v1"] * 20 + ["v2"] * 20, dtype=object),
        worker_id=np.array(["w1"] * 40, dtype=object),
        frame=np.concatenate([np.arange(20), np.arange(20)]),
        predicted=predicted,
        label=labels,
    )
    bundle = build_report(frames, fps=30, margin_frames=5)
    assert bundle.tables["transitions"].share_near_transition.tolist() == [0.0, 0.0]
    assert bundle.summary["transition"]["share_near_transition"] == 0.0
    assert bundle.summary["transition"]["adjacent_confusion_rate"] == 0.0


def test_temporal_profile_pools_videos():
    bundle = build_report(two_videos(), fps=30)
    profile = bundle.tables["temporal_profile"]
    class_two = profile[profile.class_id == 2]
    assert class_two.frames.sum() == 60
    assert class_two.loc[class_two.bin == 0, "accuracy"].iloc[0] == pytest.approx(3 / 6)
    assert np.isnan(profile.loc[profile.class_id == 5, "accuracy"]).all()


def test_anchor_defaults_to_most_accurate_class():
    bundle = build_report(two_videos(), fps=30)
    assert bundle.summary["cycle"]["anchor_class"] == bundle.summary["class_accuracy_ranking"][0]["class_id"]


def test_cycle_times_per_video():
    labels = np.array(([3] * 15 + [4] * 15) * 3)
    frames = FramePredictions(
        video_id=np.array(["v1"] * 90, dtype=object),
        worker_id=np.array(["w1"] * 90, dtype=object),
        frame=np.arange(90),
        predicted=labels.copy(),
        label=labels,
    )
    bundle = build_report(frames, fps=30, anchor_class=3)
    cycles = bundle.tables["cycle_times"]
    assert cycles[cycles.source == "label"].duration_s.tolist() == [1.0, 1.0]
    assert bundle.summary["cycle"]["mean_predicted_s"] == 1.0


def test_write_report_is_reproducible(tmp_path):
    bundle = build_report(two_videos(), fps=30)
    first = write_report(bundle, str(tmp_path / "a"))
    second = write_report(build_report(two_videos(), fps=30), str(tmp_path / "b"))
    names = sorted(os.path.basename(p) for p in first)
    assert "summary.json" in names and "worker_accuracy.svg" in names and "class_report.csv" in names
    for a, b in zip(first, second):
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read(), os.path.basename(a)
    with open(tmp_path / "a" / "summary.json") as handle:
        assert json.load(handle)["frames"] == 120
    predictions = pd.read_csv(tmp_path / "a" / "predictions.csv")
    assert list(predictions.columns) == ["video_id", "worker_id", "frame", "predicted", "label"]


def test_training_and_search_charts(tmp_path):
    history = pd.DataFrame({
        "epoch": [1, 2, 3],
        "train_loss": [2.0, 1.5, 1.0],
        "train_accuracy": [0.2, 0.4, 0.6],
        "val_loss": [np.nan, np.nan, np.nan],
        "val_accuracy": [np.nan, np.nan, np.nan],
    })
    path = plot_training_curves(history, str(tmp_path / "training.svg"))
    assert os.path.getsize(path) > 0
    trials = pd.DataFrame({
        "status": ["ok", "failed", "ok"],
        "param_count": [1000, None, 20000],
        "val_accuracy": [0.5, None, 0.8],
        "stage": [0, 0, 1],
    })
    path = plot_search_trials(trials, str(tmp_path / "trials.svg"))
    with open(path) as handle:
        assert handle.read().lstrip().startswith("<?xml")


def search_trials():
    return pd.DataFrame({
        "trial_id": [0, 1, 2, 3, 4],
        "status": ["ok", "ok", "ok", "failed", "ok"],
        "stage": [0, 0, 0, 0, 1],
        "val_accuracy": [0.5, 0.6, 0.7, None, 0.9],
        "val_loss": [1.2, 1.0, 0.9, None, 0.4],
        "param_count": [1000, 2000, 3000, None, 4000],
        "config.family": ["lstm", "td_dense", "lstm", "conv1d", "td_dense"],
        "config.learning_rate": [1e-5, 1e-4, 1e-3, 1e-2, 1e-2],
        "config.lstm_units": [8, np.nan, 32, np.nan, np.nan],
        "config.fps": [30, 30, 30, 15, 30],
    })


def test_search_sensitivity():
    table = search_sensitivity(search_trials()).set_index(["dimension", "value"])
    assert table.loc[("family", "lstm"), "mean_accuracy"] == pytest.approx(0.6)
    assert table.loc[("family", "td_dense"), "trials"] == 2
    # failed trials do not count, so conv1d never appears
    assert ("family", "conv1d") not in table.index
    assert table.loc[("learning_rate", ""), "correlation"] == pytest.approx(1.0)
    assert table.loc[("lstm_units", ""), "trials"] == 2
    assert "fps" not in table.index.get_level_values("dimension")


def test_search_report_files(tmp_path):
    written = write_search_report(search_trials(), str(tmp_path / "a"))
    names = sorted(os.path.basename(p) for p in written)
    assert names == ["parallel_coordinates.svg", "search_trials.svg", "sensitivity.csv", "top_trials.csv",
                     "trials.csv"]
    top = pd.read_csv(tmp_path / "a" / "top_trials.csv")
    assert top.trial_id.tolist() == [4, 2, 1, 0]
    again = plot_parallel_coordinates(search_trials(), str(tmp_path / "b.svg"))
    with open(again, "rb") as fresh, open(tmp_path / "a" / "parallel_coordinates.svg", "rb") as first:
        assert fresh.read() == first.read()
