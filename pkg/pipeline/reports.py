"""
Report bundle: CSV tables, a JSON summary and SVG charts.

SVG output is byte-reproducible: fixed hash salt, no date metadata.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from pipeline.eval_kpi import (  # noqa: E402
    DEFAULT_TRANSITION_MARGIN,
    class_accuracy_ranking,
    class_report,
    confusion_matrix,
    cycle_times,
    grouped_accuracy,
    segment,
    smooth,
    temporal_profile,
    transition_error_share,
)

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "mpar"
SVG_METADATA = {"Date": None}


@dataclass(eq=False)
class FramePredictions:
    """Frame-aligned predictions of one evaluation set, rows sorted by video then frame."""
    video_id: np.ndarray
    worker_id: np.ndarray
    frame: np.ndarray
    predicted: np.ndarray
    label: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "video_id": self.video_id,
            "worker_id": self.worker_id,
            "frame": self.frame,
            "predicted": self.predicted,
            "label": self.label,
        })

    def videos(self):
        for video_id in pd.unique(self.video_id):
            mask = self.video_id == video_id
            yield video_id, mask


@dataclass(eq=False)
class ReportBundle:
    tables: Dict[str, pd.DataFrame]
    summary: dict
    profile_accuracy: np.ndarray = field(default=None)


def build_report(
    frames: FramePredictions,
    fps: int,
    anchor_class: Optional[int] = None,
    margin_frames: int = DEFAULT_TRANSITION_MARGIN,
    smoothing: int = 1,
    name: str = "evaluation",
) -> ReportBundle:
    """
    Compute every table of the evaluation report.

    Cycle times are measured per video on smoothed predictions and on the
    labels. Without an anchor class the most accurate class is used.
    """
    cm = confusion_matrix(frames.predicted, frames.label)
    report = class_report(cm)
    ranking = class_accuracy_ranking(cm)
    anchor = ranking[0]["class_id"] if anchor_class is None else anchor_class

    workers = grouped_accuracy(frames.predicted, frames.label, frames.worker_id)
    worker_table = pd.DataFrame({"worker_id": list(workers), "accuracy": list(workers.values())})
    worker_table["frames"] = [int(np.sum(frames.worker_id == w)) for w in workers]

    profile_parts, transition_rows, cycle_rows = [], [], []
    correct_bins = np.zeros((cm.counts.shape[0], 10))
    count_bins = np.zeros((cm.counts.shape[0], 10), dtype=np.int64)
    for video_id, mask in frames.videos():
        predicted, labels = frames.predicted[mask], frames.label[mask]
        profile = temporal_profile(predicted, labels)
        correct_bins += np.nan_to_num(profile.accuracy) * profile.counts
        count_bins += profile.counts
        share = transition_error_share(predicted, labels, margin_frames)
        transition_rows.append({
            "video_id": video_id,
            "errors": share.errors,
            "share_near_transition": share.share_near_transition,
            "adjacent_confusion_rate": share.adjacent_confusion_rate,
            "margin_frames": margin_frames,
        })
        for source, sequence in (("predicted", smooth(predicted, smoothing)), ("label", labels)):
            for i, seconds in enumerate(cycle_times(segment(sequence), anchor, fps)):
                cycle_rows.append({"video_id": video_id, "source": source, "cycle": i, "duration_s": seconds})

    with np.errstate(invalid="ignore", divide="ignore"):
        profile_accuracy = np.where(count_bins == 0, np.nan, correct_bins / np.maximum(count_bins, 1))
    classes, bins = profile_accuracy.shape
    profile_table = pd.DataFrame({
        "class_id": np.repeat(np.arange(classes), bins),
        "bin": np.tile(np.arange(bins), classes),
        "accuracy": profile_accuracy.reshape(-1),
        "frames": count_bins.reshape(-1),
    })
    cycles = pd.DataFrame(cycle_rows, columns=["video_id", "source", "cycle", "duration_s"])
    transitions = pd.DataFrame(transition_rows)

    # per-video shares pooled by error count; video boundaries are not transitions
    errors = transitions["errors"].to_numpy() if len(transitions) else np.zeros(0)
    total_errors = int(errors.sum())
    overall = {
        column: float((transitions[column] * errors).sum() / total_errors) if total_errors else 0.0
        for column in ("share_near_transition", "adjacent_confusion_rate")
    }
    mean_cycle = cycles.groupby("source")["duration_s"].mean().to_dict() if len(cycles) else {}
    summary = {
        "name": name,
        "frames": cm.total,
        "accuracy": cm.accuracy,
        "macro_f1": float(np.mean(report.f1)),
        "degenerate_classes": [int(c) for c in np.flatnonzero(report.degenerate)],
        "worker_accuracy": workers,
        "class_accuracy_ranking": ranking,
        "transition": {
            "margin_frames": margin_frames,
            "share_near_transition": overall["share_near_transition"],
            "adjacent_confusion_rate": overall["adjacent_confusion_rate"],
        },
        "cycle": {
            "anchor_class": anchor,
            "smoothing": smoothing,
            "mean_predicted_s": mean_cycle.get("predicted"),
            "mean_label_s": mean_cycle.get("label"),
        },
    }
    tables = {
        "class_report": report.to_frame(),
        "confusion_matrix": cm.to_frame().reset_index(),
        "worker_accuracy": worker_table,
        "temporal_profile": profile_table,
        "transitions": transitions,
        "cycle_times": cycles,
        "predictions": frames.to_frame(),
    }
    return ReportBundle(tables=tables, summary=summary, profile_accuracy=profile_accuracy)


def _save(fig, path: str) -> str:
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    return path


def plot_worker_accuracy(table: pd.DataFrame, path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(table["worker_id"], table["accuracy"], color="tab:blue")
    ax.set_ylim(0, 1)
    ax.set_xlabel("worker")
    ax.set_ylabel("frame accuracy")
    fig.tight_layout()
    return _save(fig, path)


def plot_class_report(table: pd.DataFrame, path: str) -> str:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(table["class_id"], table["f1"], color="tab:green", label="F1")
    ax.set_ylim(0, 1)
    ax.set_xticks(table["class_id"])
    ax.set_xlabel("motion class")
    ax.set_ylabel("F1")
    support = ax.twinx()
    support.plot(table["class_id"], table["support"], "o-", color="tab:gray", label="support")
    support.set_ylabel("support (frames)")
    fig.tight_layout()
    return _save(fig, path)


def plot_temporal_profile(profile_accuracy: np.ndarray, path: str) -> str:
    fig, ax = plt.subplots(figsize=(7, 4))
    positions = (np.arange(profile_accuracy.shape[1]) + 0.5) / profile_accuracy.shape[1]
    for class_id, row in enumerate(profile_accuracy):
        if np.isfinite(row).any():
            ax.plot(positions, row, marker=".", label=str(class_id))
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("relative position in segment")
    ax.set_ylabel("accuracy")
    ax.legend(title="class", ncol=5, fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_training_curves(history: pd.DataFrame, path: str) -> str:
    fig, (loss_ax, acc_ax) = plt.subplots(1, 2, figsize=(9, 3.5))
    for column, ax in (("loss", loss_ax), ("accuracy", acc_ax)):
        ax.plot(history["epoch"], history[f"train_{column}"], label="train")
        if f"val_{column}" in history and history[f"val_{column}"].notna().any():
            ax.plot(history["epoch"], history[f"val_{column}"], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel(column)
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_search_trials(trials: pd.DataFrame, path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ok = trials[trials["status"] == "ok"]
    ax.scatter(ok["param_count"], ok["val_accuracy"], c=ok["stage"], cmap="viridis", s=14)
    ax.set_xscale("log")
    ax.set_ylim(0, 1)
    ax.set_xlabel("parameters")
    ax.set_ylabel("validation accuracy")
    fig.tight_layout()
    return _save(fig, path)


CONFIG_PREFIX = "config."


def _varying_dims(ok: pd.DataFrame) -> List[str]:
    columns = [c for c in ok.columns if c.startswith(CONFIG_PREFIX)]
    return [c for c in columns if ok[c].dropna().astype(str).nunique() > 1]


def _is_numeric(column: pd.Series) -> bool:
    return pd.api.types.is_numeric_dtype(column) and not pd.api.types.is_bool_dtype(column)


def search_sensitivity(trials: pd.DataFrame) -> pd.DataFrame:
    """
    How validation accuracy moves with each searched dimension, over ok trials.

    Categorical dimensions get one row per value with the mean accuracy of
    the trials that used it. Numeric dimensions get one row with the rank
    correlation between value and accuracy, which treats log-scaled and
    linear dimensions alike. Dimensions with a single value and trials where
    a dimension is inactive are left out.
    """
    columns = ["dimension", "kind", "value", "trials", "mean_accuracy", "correlation"]
    ok = trials[trials["status"] == "ok"]
    rows = []
    for column in _varying_dims(ok):
        used = ok[[column, "val_accuracy"]].dropna()
        name = column[len(CONFIG_PREFIX):]
        if _is_numeric(used[column]):
            correlation = used[column].rank().corr(used["val_accuracy"].rank())
            rows.append({"dimension": name, "kind": "numeric", "value": "", "trials": len(used),
                         "mean_accuracy": used["val_accuracy"].mean(), "correlation": correlation})
            continue
        groups = used.groupby(used[column].astype(str))["val_accuracy"].agg(["count", "mean"])
        for value, group in groups.sort_index().iterrows():
            rows.append({"dimension": name, "kind": "categorical", "value": value, "trials": int(group["count"]),
                         "mean_accuracy": group["mean"], "correlation": np.nan})
    return pd.DataFrame(rows, columns=columns)


def _axis_positions(column: pd.Series) -> pd.Series:
    """A config column mapped onto [0, 1]; inactive trials stay NaN."""
    present = column.dropna()
    if not _is_numeric(present):
        codes = {v: i for i, v in enumerate(sorted(present.astype(str).unique()))}
        scale = max(len(codes) - 1, 1)
        return column.map(lambda v: codes[str(v)] / scale if pd.notna(v) else np.nan)
    values = column.astype(float)
    lo, hi = present.min(), present.max()
    if lo > 0 and hi / lo >= 100:
        values, lo, hi = np.log10(values), np.log10(lo), np.log10(hi)
    return (values - lo) / (hi - lo) if hi > lo else values * 0.0 + 0.5


def plot_parallel_coordinates(trials: pd.DataFrame, path: str) -> str:
    """One line per ok trial across the varying dimensions, colored by validation accuracy."""
    ok = trials[trials["status"] == "ok"].sort_values("trial_id")
    dims = _varying_dims(ok)
    fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(dims) + 2), 4))
    colors = plt.get_cmap("viridis")
    if dims:
        positions = pd.DataFrame({c: _axis_positions(ok[c]) for c in dims})
        for (_, row), accuracy in zip(positions.iterrows(), ok["val_accuracy"]):
            ax.plot(range(len(dims)), row.to_numpy(dtype=float), color=colors(accuracy), alpha=0.7, lw=1)
        for x in range(len(dims)):
            ax.axvline(x, color="gray", lw=0.5)
        ax.set_xticks(range(len(dims)))
        ax.set_xticklabels([c[len(CONFIG_PREFIX):] for c in dims], rotation=45, ha="right", fontsize="small")
    ax.set_ylim(-0.05, 1.05)
    ax.set_ylabel("relative value")
    mappable = plt.cm.ScalarMappable(cmap=colors, norm=plt.Normalize(0, 1))
    fig.colorbar(mappable, ax=ax, label="validation accuracy")
    fig.tight_layout()
    return _save(fig, path)


def write_search_report(trials: pd.DataFrame, directory: str) -> List[str]:
    """Trial table, top trials, sensitivity table and charts of a search run log."""
    os.makedirs(directory, exist_ok=True)
    written = [os.path.join(directory, "trials.csv")]
    trials.to_csv(written[0], index=False, lineterminator="\n")
    ok = trials[trials["status"] == "ok"]
    if len(ok):
        columns = ["trial_id", "stage", "val_accuracy", "val_loss", "param_count"]
        path = os.path.join(directory, "top_trials.csv")
        ok.sort_values("val_accuracy", ascending=False, kind="stable")[columns].head(20).to_csv(
            path, index=False, lineterminator="\n")
        written.append(path)
        path = os.path.join(directory, "sensitivity.csv")
        search_sensitivity(trials).to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
        written.append(path)
        written.append(plot_search_trials(trials, os.path.join(directory, "search_trials.svg")))
        written.append(plot_parallel_coordinates(trials, os.path.join(directory, "parallel_coordinates.svg")))
    logger.info("Wrote %d search report files to %s", len(written), directory)
    return written


def write_report(bundle: ReportBundle, directory: str, charts: bool = True) -> List[str]:
    """Write tables as CSV, summary.json and the SVG charts; returns written paths."""
    os.makedirs(directory, exist_ok=True)
    written = []
    for name, table in bundle.tables.items():
        path = os.path.join(directory, f"{name}.csv")
        table.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
        written.append(path)
    path = os.path.join(directory, "summary.json")
    with open(path, "w") as handle:
        json.dump(bundle.summary, handle, indent=2, sort_keys=True)
        handle.write("\n")
    written.append(path)
    if charts:
        written.append(plot_worker_accuracy(bundle.tables["worker_accuracy"],
                                            os.path.join(directory, "worker_accuracy.svg")))
        written.append(plot_class_report(bundle.tables["class_report"],
                                         os.path.join(directory, "class_report.svg")))
        written.append(plot_temporal_profile(bundle.profile_accuracy,
                                             os.path.join(directory, "temporal_profile.svg")))
    logger.info("Wrote %d report files to %s", len(written), directory)
    return written
