"""
Canonical domain types for hand-skeleton frames.

A frame carries two hand slots in the order the landmark extractor reported
them. A slot is either a full 21-landmark observation or absent; there is no
landmark-level missingness. Bulk data travels as a columnar FrameStream,
single records as the pydantic FrameRecord.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Dict, Iterable, List, Literal, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from pipeline.errors import (
    InvalidHandedness,
    LabelOutOfRange,
    MixedMissingness,
    NonFiniteCoordinate,
    ScoreOutOfRange,
    SkeletonError,
)
from pipeline_config import (
    FIVE_POINT_INDICES,
    HANDEDNESS_LABELS,
    N_CLASSES,
    N_DIMS,
    N_LANDMARKS,
    N_SLOTS,
    NO_HAND,
    UNLABELED,
    get_points_per_hand,
)

logger = logging.getLogger(__name__)

ReductionMode = Literal["full", "center_of_gravity", "five_points"]

SLOT_COORDS: int = N_LANDMARKS * N_DIMS  # 63


class MotionClass(IntEnum):
    """The ten motion classes; 0 is the error class."""
    ERROR = 0
    MC1 = 1
    MC2 = 2
    MC3 = 3
    MC4 = 4
    MC5 = 5
    MC6 = 6
    MC7 = 7
    MC8 = 8
    MC9 = 9


def coordinate_columns(slot: int) -> List[str]:
    """CSV column names of one slot's 63 coordinates (x, y, z per landmark)."""
    return [f"s{slot}_{axis}{i}" for i in range(N_LANDMARKS) for axis in ("x", "y", "z")]


def slot_columns(slot: int) -> List[str]:
    """All CSV columns of one slot, flag and scores first."""
    return [
        f"s{slot}_present",
        f"s{slot}_handedness",
        f"s{slot}_hand_score",
        f"s{slot}_det_score",
    ] + coordinate_columns(slot)


FRAME_COLUMNS: List[str] = (
    ["video_id", "worker_id", "frame_index"]
    + slot_columns(0)
    + slot_columns(1)
    + ["label"]
)


class Landmark(BaseModel):
    """One landmark in normalized image coordinates plus relative depth."""
    model_config = ConfigDict(frozen=True)

    x: float
    y: float
    z: float

    @field_validator("x", "y", "z")
    @classmethod
    def validate_finite(cls, v):
        if not math.isfinite(v):
            raise ValueError("landmark coordinates must be finite")
        return v


class HandObservation(BaseModel):
    """A detected hand: 21 landmarks plus the extractor's confidence scores."""
    model_config = ConfigDict(frozen=True)

    landmarks: Tuple[Landmark, ...] = Field(min_length=N_LANDMARKS, max_length=N_LANDMARKS)
    handedness_label: Literal["Left", "Right"]
    handedness_score: float = Field(ge=0.0, le=1.0)
    detection_score: float = Field(ge=0.0, le=1.0)

    def points(self) -> np.ndarray:
        """Landmarks as a (21, 3) float64 array."""
        return np.array([[lm.x, lm.y, lm.z] for lm in self.landmarks], dtype=np.float64)


class FrameRecord(BaseModel):
    """One timestamped frame of a video stream."""
    model_config = ConfigDict(frozen=True)

    video_id: str
    worker_id: str
    frame_index: int = Field(ge=0)
    slots: Tuple[Optional[HandObservation], Optional[HandObservation]]
    label: Optional[int] = Field(default=None, ge=0, le=N_CLASSES - 1)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Flattened frame: slot 0 then slot 1, x/y/z contiguous per landmark."""
    values: np.ndarray
    points_per_hand: int
    imputed_flags: Tuple[bool, bool] = (False, False)

    def __len__(self) -> int:
        return len(self.values)


def _as_float(value: Any) -> float:
    if value is None:
        return math.nan
    if isinstance(value, str):
        value = value.strip()
        if value == "":
            return math.nan
    try:
        return float(value)
    except (TypeError, ValueError):
        raise SkeletonError(f"not a number: {value!r}")


def _as_flag(value: Any) -> Optional[bool]:
    number = _as_float(value)
    if math.isnan(number):
        return None
    if number not in (0.0, 1.0):
        raise SkeletonError(f"presence flag must be 0 or 1, got {value!r}")
    return number == 1.0


def check_label(value: Any) -> Optional[int]:
    """
    Validate a motion-class label.

    Args:
        value: Raw label (int, str, None or empty)

    Returns:
        The class id, or None when the frame is unlabeled

    Raises:
        LabelOutOfRange: If the label is not one of the ten classes
    """
    number = _as_float(value)
    if math.isnan(number):
        return None
    if number != int(number) or not 0 <= number < N_CLASSES:
        raise LabelOutOfRange(f"label {value!r} is not in 0..{N_CLASSES - 1}")
    return int(number)


def _check_score(name: str, value: Any) -> float:
    score = _as_float(value)
    if math.isnan(score) or not 0.0 <= score <= 1.0:
        raise ScoreOutOfRange(f"{name} must lie in [0, 1], got {value!r}")
    return score


def _validate_slot(raw: Mapping[str, Any], slot: int) -> Tuple[Optional[HandObservation], int]:
    values = np.array([_as_float(raw.get(c)) for c in coordinate_columns(slot)])
    missing = np.isnan(values)
    flag = _as_flag(raw.get(f"s{slot}_present"))

    if missing.all():
        if flag:
            raise MixedMissingness(f"slot {slot} is flagged present but has no coordinates")
        return None, 0
    if missing.any():
        raise MixedMissingness(
            f"slot {slot}: {int(missing.sum())} of {SLOT_COORDS} coordinates missing"
        )
    if flag is False:
        raise MixedMissingness(f"slot {slot} is flagged absent but carries coordinates")
    if not np.isfinite(values).all():
        raise NonFiniteCoordinate(f"slot {slot} has non-finite coordinates")

    handedness = raw.get(f"s{slot}_handedness")
    handedness = handedness.strip() if isinstance(handedness, str) else handedness
    if handedness not in HANDEDNESS_LABELS:
        raise InvalidHandedness(f"slot {slot}: handedness must be Left or Right, got {handedness!r}")

    points = values.reshape(N_LANDMARKS, N_DIMS)
    out_of_frame = int(((points[:, :2] < 0.0) | (points[:, :2] > 1.0)).sum())
    observation = HandObservation(
        landmarks=tuple(Landmark(x=p[0], y=p[1], z=p[2]) for p in points),
        handedness_label=handedness,
        handedness_score=_check_score(f"s{slot}_hand_score", raw.get(f"s{slot}_hand_score")),
        detection_score=_check_score(f"s{slot}_det_score", raw.get(f"s{slot}_det_score")),
    )
    return observation, out_of_frame


def validate_frame(raw: Mapping[str, Any]) -> FrameRecord:
    """
    Validate unchecked frame data (a mapping keyed by the frame-file columns).

    Args:
        raw: Mapping with video_id, worker_id, frame_index, slot fields and label

    Returns:
        FrameRecord satisfying all schema invariants

    Raises:
        MixedMissingness: If a slot is partially missing or its flag disagrees
        LabelOutOfRange: If the label is not in 0..9
        ScoreOutOfRange: If a confidence score is outside [0, 1]
    """
    video_id = str(raw.get("video_id") or "").strip()
    worker_id = str(raw.get("worker_id") or "").strip()
    if not video_id or not worker_id:
        raise SkeletonError("video_id and worker_id are required and cannot be empty")

    frame_index = _as_float(raw.get("frame_index"))
    if math.isnan(frame_index) or frame_index != int(frame_index) or frame_index < 0:
        raise SkeletonError(f"frame_index must be a non-negative integer, got {raw.get('frame_index')!r}")

    slot0, out0 = _validate_slot(raw, 0)
    slot1, out1 = _validate_slot(raw, 1)
    if out0 + out1:
        logger.warning(
            "Frame %s/%d: %d coordinates outside [0, 1] (accepted, not clamped)",
            video_id, int(frame_index), out0 + out1,
        )

    return FrameRecord(
        video_id=video_id,
        worker_id=worker_id,
        frame_index=int(frame_index),
        slots=(slot0, slot1),
        label=check_label(raw.get("label")),
    )


def serialize_frame(record: FrameRecord) -> Dict[str, Any]:
    """Inverse of validate_frame: the record as a frame-file row mapping."""
    row: Dict[str, Any] = {
        "video_id": record.video_id,
        "worker_id": record.worker_id,
        "frame_index": record.frame_index,
    }
    for slot, observation in enumerate(record.slots):
        columns = coordinate_columns(slot)
        if observation is None:
            row[f"s{slot}_present"] = 0
            row[f"s{slot}_handedness"] = ""
            row[f"s{slot}_hand_score"] = ""
            row[f"s{slot}_det_score"] = ""
            row.update({c: "" for c in columns})
        else:
            row[f"s{slot}_present"] = 1
            row[f"s{slot}_handedness"] = observation.handedness_label
            row[f"s{slot}_hand_score"] = observation.handedness_score
            row[f"s{slot}_det_score"] = observation.detection_score
            row.update(zip(columns, observation.points().reshape(-1).tolist()))
    row["label"] = "" if record.label is None else record.label
    return row


def reduce_points(points: np.ndarray, mode: str) -> np.ndarray:
    """
    Reduce the landmark axis of (..., 21, 3) points.

    "full" keeps all 21, "center_of_gravity" keeps the mean point,
    "five_points" keeps wrist and the four non-thumb/thumb tips.
    """
    if mode == "full":
        return points
    if mode == "center_of_gravity":
        return points.mean(axis=-2, keepdims=True)
    if mode == "five_points":
        return points[..., FIVE_POINT_INDICES, :]
    raise ValueError(f"Unsupported reduction mode: {mode}")


def flatten(frame: FrameRecord, layout: ReductionMode = "full") -> FeatureVector:
    """
    Flatten a validated frame into a feature vector of length 2 x P x 3.

    Absent slots are filled with NaN; filling is the imputation layer's job.
    """
    points_per_hand = get_points_per_hand(layout)
    values = np.full((N_SLOTS, points_per_hand, N_DIMS), np.nan)
    for slot, observation in enumerate(frame.slots):
        if observation is not None:
            values[slot] = reduce_points(observation.points(), layout)
    return FeatureVector(values=values.reshape(-1), points_per_hand=points_per_hand)


@dataclass(frozen=True, eq=False)
class FrameStream:
    """
    Columnar, validated frame stream of a single video.

    Arrays are aligned on the first axis (N frames). Absent slots have NaN
    coordinates and scores and handedness NO_HAND; unlabeled frames have
    label UNLABELED.
    """
    video_id: str
    worker_id: str
    frame_index: np.ndarray                 # (N,) int64
    coords: np.ndarray                      # (N, 2, 21, 3) float64
    present: np.ndarray                     # (N, 2) bool
    handedness: np.ndarray                  # (N, 2) int8
    handedness_score: np.ndarray            # (N, 2) float64
    detection_score: np.ndarray             # (N, 2) float64
    labels: np.ndarray = field(default=None)  # (N,) int16

    def __post_init__(self):
        if self.labels is None:
            object.__setattr__(self, "labels", np.full(len(self.frame_index), UNLABELED, dtype=np.int16))

    def __len__(self) -> int:
        return len(self.frame_index)

    @property
    def is_labeled(self) -> bool:
        return bool(len(self)) and bool((self.labels != UNLABELED).all())

    def take(self, indices) -> "FrameStream":
        """Sub-stream of the given positions (array, mask or slice)."""
        return FrameStream(
            video_id=self.video_id,
            worker_id=self.worker_id,
            frame_index=self.frame_index[indices],
            coords=self.coords[indices],
            present=self.present[indices],
            handedness=self.handedness[indices],
            handedness_score=self.handedness_score[indices],
            detection_score=self.detection_score[indices],
            labels=self.labels[indices],
        )

    def with_labels(self, labels: np.ndarray) -> "FrameStream":
        return FrameStream(
            video_id=self.video_id,
            worker_id=self.worker_id,
            frame_index=self.frame_index,
            coords=self.coords,
            present=self.present,
            handedness=self.handedness,
            handedness_score=self.handedness_score,
            detection_score=self.detection_score,
            labels=np.asarray(labels, dtype=np.int16),
        )

    def record(self, i: int) -> FrameRecord:
        slots = []
        for slot in range(N_SLOTS):
            if not self.present[i, slot]:
                slots.append(None)
                continue
            slots.append(HandObservation(
                landmarks=tuple(Landmark(x=p[0], y=p[1], z=p[2]) for p in self.coords[i, slot].tolist()),
                handedness_label=HANDEDNESS_LABELS[int(self.handedness[i, slot])],
                handedness_score=float(self.handedness_score[i, slot]),
                detection_score=float(self.detection_score[i, slot]),
            ))
        label = int(self.labels[i])
        return FrameRecord(
            video_id=self.video_id,
            worker_id=self.worker_id,
            frame_index=int(self.frame_index[i]),
            slots=tuple(slots),
            label=None if label == UNLABELED else label,
        )

    def records(self) -> Iterable[FrameRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def checksum(self) -> str:
        """SHA-256 over all arrays; equal streams have equal checksums."""
        digest = hashlib.sha256()
        for array in (self.frame_index, self.coords, self.present, self.handedness,
                      self.handedness_score, self.detection_score, self.labels):
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()

    @classmethod
    def from_records(cls, records: List[FrameRecord]) -> "FrameStream":
        """Build a stream from records of one video, order preserved."""
        if not records:
            raise SkeletonError("cannot build a stream from zero records")
        n = len(records)
        coords = np.full((n, N_SLOTS, N_LANDMARKS, N_DIMS), np.nan)
        present = np.zeros((n, N_SLOTS), dtype=bool)
        handedness = np.full((n, N_SLOTS), NO_HAND, dtype=np.int8)
        hand_score = np.full((n, N_SLOTS), np.nan)
        det_score = np.full((n, N_SLOTS), np.nan)
        labels = np.full(n, UNLABELED, dtype=np.int16)
        for i, record in enumerate(records):
            for slot, observation in enumerate(record.slots):
                if observation is None:
                    continue
                coords[i, slot] = observation.points()
                present[i, slot] = True
                handedness[i, slot] = HANDEDNESS_LABELS.index(observation.handedness_label)
                hand_score[i, slot] = observation.handedness_score
                det_score[i, slot] = observation.detection_score
            if record.label is not None:
                labels[i] = record.label
        return cls(
            video_id=records[0].video_id,
            worker_id=records[0].worker_id,
            frame_index=np.array([r.frame_index for r in records], dtype=np.int64),
            coords=coords,
            present=present,
            handedness=handedness,
            handedness_score=hand_score,
            detection_score=det_score,
            labels=labels,
        )


def check_frame_arrays(
    coords: np.ndarray,
    present_flag: np.ndarray,
    handedness: np.ndarray,
    handedness_score: np.ndarray,
    detection_score: np.ndarray,
    labels: np.ndarray,
) -> Tuple[np.ndarray, Optional[Tuple[int, SkeletonError]]]:
    """
    Vectorized form of validate_frame for whole files.

    Args:
        coords: (N, 2, 63) float, NaN where a field is empty
        present_flag: (N, 2) float, 1/0 or NaN when the flag was empty
        handedness: (N, 2) int, 0 Left / 1 Right / NO_HAND empty / -2 invalid
        handedness_score: (N, 2) float
        detection_score: (N, 2) float
        labels: (N,) float, NaN when unlabeled

    Returns:
        (present mask (N, 2), None) on success, or (present mask, (row, error))
        for the first offending row.
    """
    missing = np.isnan(coords)
    n_missing = missing.sum(axis=-1)
    present = n_missing == 0
    problems: List[Tuple[int, SkeletonError]] = []

    def first(mask: np.ndarray, error: SkeletonError):
        rows = np.flatnonzero(mask.reshape(len(mask), -1).any(axis=-1))
        if rows.size:
            problems.append((int(rows[0]), error))

    first((n_missing > 0) & (n_missing < coords.shape[-1]),
          MixedMissingness("slot partially missing"))
    first(present & (present_flag == 0), MixedMissingness("slot flagged absent but carries coordinates"))
    first(~present & (present_flag == 1), MixedMissingness("slot flagged present but has no coordinates"))
    first(~np.isnan(present_flag) & (present_flag != 0) & (present_flag != 1),
          SkeletonError("presence flag must be 0 or 1"))
    first(present & ~np.isfinite(np.where(missing, 0.0, coords)).all(axis=-1),
          NonFiniteCoordinate("non-finite coordinates"))
    first(present & ~np.isin(handedness, (0, 1)), InvalidHandedness("handedness must be Left or Right"))
    for name, score in (("hand_score", handedness_score), ("det_score", detection_score)):
        first(present & ~((score >= 0.0) & (score <= 1.0)), ScoreOutOfRange(f"{name} must lie in [0, 1]"))
    labeled = ~np.isnan(labels)
    safe = np.where(labeled, labels, 0.0)
    first(labeled & ((safe != np.floor(safe)) | (safe < 0) | (safe >= N_CLASSES)),
          LabelOutOfRange(f"label is not in 0..{N_CLASSES - 1}"))

    if problems:
        return present, min(problems, key=lambda p: p[0])
    return present, None
