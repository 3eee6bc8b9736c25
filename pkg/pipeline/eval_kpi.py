"""
Evaluation metrics and KPI plumbing.

Confusion matrix, per-class precision/recall/F1/support, grouped accuracy,
accuracy over the normalized position inside ground-truth segments,
transition-error analysis, majority smoothing, run-length segmentation and
cycle times.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Sequence

import numpy as np
import pandas as pd

from pipeline.errors import EvenWindow, LengthMismatch
from pipeline_config import N_CLASSES

logger = logging.getLogger(__name__)

DEFAULT_TRANSITION_MARGIN = 15


def _aligned(predictions, labels, *others):
    arrays = [np.asarray(predictions, dtype=np.int64), np.asarray(labels, dtype=np.int64)]
    arrays += [np.asarray(o) for o in others]
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise LengthMismatch(f"sequences differ in length: {[len(a) for a in arrays]}")
    return arrays


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """counts[true, predicted]."""
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def to_frame(self) -> pd.DataFrame:
        classes = range(self.counts.shape[0])
        return pd.DataFrame(
            self.counts,
            index=pd.Index(classes, name="true"),
            columns=pd.Index(classes, name="predicted"),
        )


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int], n_classes: int = N_CLASSES) -> ConfusionMatrix:
    """
    Count (true, predicted) pairs.

    Raises:
        LengthMismatch: If predictions and labels differ in length
    """
    predictions, labels = _aligned(predictions, labels)
    for name, values in (("prediction", predictions), ("label", labels)):
        if len(values) and (values.min() < 0 or values.max() >= n_classes):
            raise ValueError(f"{name} classes must be in 0..{n_classes - 1}")
    counts = np.bincount(labels * n_classes + predictions, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes).astype(np.int64))


@dataclass(frozen=True, eq=False)
class ClassReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    degenerate: np.ndarray      # some metric of the class was 0/0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "class_id": np.arange(len(self.support)),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
            "degenerate": self.degenerate,
        })


def _safe_divide(numerator: np.ndarray, denominator: np.ndarray):
    zero = denominator == 0
    return np.where(zero, 0.0, numerator / np.where(zero, 1, denominator)), zero


def class_report(cm: ConfusionMatrix) -> ClassReport:
    """Precision = diag / column sum, recall = diag / row sum; any 0/0 is 0 and flags the class."""
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    precision, p_zero = _safe_divide(diag, counts.sum(axis=0))
    recall, r_zero = _safe_divide(diag, counts.sum(axis=1))
    f1, f_zero = _safe_divide(2 * precision * recall, precision + recall)
    return ClassReport(
        precision=precision,
        recall=recall,
        f1=f1,
        support=cm.counts.sum(axis=1),
        degenerate=p_zero | r_zero | f_zero,
    )


def grouped_accuracy(predictions: Sequence[int], labels: Sequence[int], groups: Sequence) -> Dict[str, float]:
    """Fraction of correct frames per group id (e.g. worker)."""
    predictions, labels, groups = _aligned(predictions, labels, groups)
    frame = pd.DataFrame({"group": groups.astype(str), "correct": predictions == labels})
    return frame.groupby("group", sort=True)["correct"].mean().astype(float).to_dict()


class Segment(NamedTuple):
    cls: int
    start: int
    end: int    # inclusive


SegmentList = List[Segment]


def segment(sequence: Sequence[int]) -> SegmentList:
    """Maximal runs of equal values as (class, start, end) with inclusive ends."""
    values = np.asarray(sequence, dtype=np.int64)
    if len(values) == 0:
        return []
    starts = np.concatenate([[0], np.flatnonzero(np.diff(values) != 0) + 1])
    ends = np.concatenate([starts[1:] - 1, [len(values) - 1]])
    return [Segment(int(values[s]), int(s), int(e)) for s, e in zip(starts, ends)]


def flatten_segments(segments: SegmentList) -> np.ndarray:
    if not segments:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.full(s.end - s.start + 1, s.cls, dtype=np.int64) for s in segments])


@dataclass(frozen=True, eq=False)
class TemporalProfile:
    """Per class and position bin: accuracy (NaN when the bin is empty) and frame count."""
    accuracy: np.ndarray    # (classes, n_bins)
    counts: np.ndarray      # (classes, n_bins)

    def to_frame(self) -> pd.DataFrame:
        classes, bins = self.accuracy.shape
        return pd.DataFrame({
            "class_id": np.repeat(np.arange(classes), bins),
            "bin": np.tile(np.arange(bins), classes),
            "accuracy": self.accuracy.reshape(-1),
            "frames": self.counts.reshape(-1),
        })


def temporal_profile(
    predictions: Sequence[int],
    labels: Sequence[int],
    n_bins: int = 10,
    n_classes: int = N_CLASSES,
) -> TemporalProfile:
    """
    Accuracy by relative position inside ground-truth segments.

    Frame i of a segment of length L goes to bin floor(n_bins * i / L).
    """
    predictions, labels = _aligned(predictions, labels)
    correct = np.zeros((n_classes, n_bins))
    counts = np.zeros((n_classes, n_bins), dtype=np.int64)
    for run in segment(labels):
        length = run.end - run.start + 1
        bins = (n_bins * np.arange(length)) // length
        hits = predictions[run.start:run.end + 1] == run.cls
        np.add.at(counts[run.cls], bins, 1)
        np.add.at(correct[run.cls], bins, hits)
    accuracy, _ = _safe_divide(correct, counts)
    return TemporalProfile(np.where(counts == 0, np.nan, accuracy), counts)


@dataclass(frozen=True)
class TransitionShare:
    share_near_transition: float
    adjacent_confusion_rate: float
    errors: int
    margin_frames: int


def transition_error_share(
    predictions: Sequence[int],
    labels: Sequence[int],
    margin_frames: int = DEFAULT_TRANSITION_MARGIN,
) -> TransitionShare:
    """
    Where do errors happen, and what do they confuse the truth with?

    A ground-truth class change sits at the first frame of the new segment;
    an error is near a transition when it lies within margin_frames of one.
    An adjacent confusion predicts the class of the previous or next
    ground-truth segment. Both shares are 0 for error-free input.
    """
    predictions, labels = _aligned(predictions, labels)
    wrong = np.flatnonzero(predictions != labels)
    if wrong.size == 0:
        return TransitionShare(0.0, 0.0, 0, margin_frames)

    changes = np.flatnonzero(np.diff(labels) != 0) + 1
    if changes.size:
        position = np.searchsorted(changes, wrong)
        left = changes[np.clip(position - 1, 0, changes.size - 1)]
        right = changes[np.clip(position, 0, changes.size - 1)]
        near = np.minimum(np.abs(wrong - left), np.abs(wrong - right)) <= margin_frames
    else:
        near = np.zeros(wrong.size, dtype=bool)

    runs = segment(labels)
    run_of = np.searchsorted([r.start for r in runs], wrong, side="right") - 1
    classes = np.array([r.cls for r in runs])
    previous = np.where(run_of > 0, classes[np.maximum(run_of - 1, 0)], -1)
    following = np.where(run_of < len(runs) - 1, classes[np.minimum(run_of + 1, len(runs) - 1)], -1)
    adjacent = (predictions[wrong] == previous) | (predictions[wrong] == following)

    return TransitionShare(
        share_near_transition=float(near.mean()),
        adjacent_confusion_rate=float(adjacent.mean()),
        errors=int(wrong.size),
        margin_frames=margin_frames,
    )


def smooth(predictions: Sequence[int], k: int, n_classes: int = N_CLASSES) -> np.ndarray:
    """
    Majority vote over a centered window of k frames (truncated at the edges).

    On a tie the original prediction stays when it is among the tied
    classes; otherwise the lowest tied class wins.

    Raises:
        EvenWindow: If k is even or below 1
    """
    if k < 1 or k % 2 == 0:
        raise EvenWindow(f"smoothing window must be odd and positive, got {k}")
    values = np.asarray(predictions, dtype=np.int64)
    if k == 1 or len(values) == 0:
        return values.copy()
    half = k // 2
    one_hot = np.zeros((len(values) + 1, n_classes), dtype=np.int64)
    one_hot[np.arange(len(values)) + 1, values] = 1
    cumulative = one_hot.cumsum(axis=0)
    index = np.arange(len(values))
    low = np.clip(index - half, 0, len(values))
    high = np.clip(index + half + 1, 0, len(values))
    votes = cumulative[high] - cumulative[low]
    best = votes.max(axis=1, keepdims=True)
    tied = votes == best
    keep = tied[index, values]
    return np.where(keep, values, tied.argmax(axis=1))


def cycle_times(segments: SegmentList, anchor_class: int, fps: float) -> List[float]:
    """Seconds between successive starts of anchor-class segments."""
    if fps <= 0:
        raise ValueError("fps must be positive")
    starts = np.array([s.start for s in segments if s.cls == anchor_class], dtype=np.float64)
    if starts.size < 2:
        return []
    return (np.diff(starts) / fps).tolist()


def class_accuracy_ranking(cm: ConfusionMatrix) -> List[Dict[str, float]]:
    """Classes ordered by recall (highest first), used to pick a cycle anchor."""
    report = class_report(cm)
    order = sorted(range(len(report.recall)), key=lambda c: (-report.recall[c], c))
    return [
        {"class_id": c, "accuracy": float(report.recall[c]), "support": int(report.support[c])}
        for c in order
    ]
