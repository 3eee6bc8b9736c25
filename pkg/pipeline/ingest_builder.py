"""
Frame-file and label-table ingestion plus the dataset builder.

Covers parsing and writing of the CSV formats, label application, frame-rate
emulation by exact decimation, the per-video train/validation split with
holdout workers, and sliding-window instance building.
"""

import logging
import math
import re
from dataclasses import dataclass
from typing import IO, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from pipeline.errors import (
    EmptyTable,
    EmptyVideo,
    HistoryBudgetExceeded,
    MalformedRow,
    NonDivisorRate,
    NonMonotonicFrameIndex,
    SkeletonError,
    StreamTooShort,
    UnlabeledPrefix,
)
from pipeline.preprocess import PreprocessPipeline, SkeletonWindow
from pipeline.skeleton_model import (
    FRAME_COLUMNS,
    FrameStream,
    check_frame_arrays,
    coordinate_columns,
)
from pipeline_config import (
    HANDEDNESS_LABELS,
    N_CLASSES,
    N_DIMS,
    N_LANDMARKS,
    N_SLOTS,
    NO_HAND,
    SOURCE_FPS,
    UNLABELED,
    get_decimation,
)

logger = logging.getLogger(__name__)

Source = Union[str, IO]

LABEL_COLUMNS = ["start_frame", "class_id"]


class LabelTable(BaseModel):
    """Start frames of motion classes; each entry holds until the next start."""
    model_config = ConfigDict(frozen=True)

    entries: List[Tuple[int, int]] = []

    @field_validator("entries")
    @classmethod
    def validate_entries(cls, v):
        starts = [start for start, _ in v]
        if any(start < 0 for start in starts):
            raise ValueError("start_frame must be non-negative")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("start_frame must be strictly increasing")
        if any(not 0 <= c < N_CLASSES for _, c in v):
            raise ValueError(f"class_id must be in 0..{N_CLASSES - 1}")
        return v

    @classmethod
    def from_labels(cls, frame_index: np.ndarray, labels: np.ndarray) -> "LabelTable":
        """Table of run starts of a labeled frame sequence."""
        if len(labels) == 0:
            return cls(entries=[])
        change = np.flatnonzero(np.diff(labels) != 0) + 1
        starts = np.concatenate([[0], change])
        return cls(entries=[(int(frame_index[i]), int(labels[i])) for i in starts])


# Parsing

def _undecodable_line(source: Source) -> Optional[int]:
    """1-based line of the first byte that is not UTF-8, when the source can be reread."""
    try:
        if isinstance(source, str):
            with open(source, "rb") as handle:
                data = handle.read()
        elif source.seekable():
            source.seek(0)
            data = source.read()
        else:
            return None
    except (OSError, AttributeError):
        return None
    if not isinstance(data, bytes):
        return None
    try:
        data.decode("utf-8")
    except UnicodeDecodeError as e:
        return data.count(b"\n", 0, e.start) + 1
    return None


def _read_csv(source: Source, what: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(source, dtype=str, keep_default_na=False, na_filter=False)
    except pd.errors.EmptyDataError:
        raise MalformedRow(f"{what} is empty; a header row is required", line=1)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise MalformedRow(f"{what}: {e}", line=int(match.group(1)) if match else None)
    except UnicodeDecodeError as e:
        raise MalformedRow(f"{what} is not valid UTF-8: {e.reason}", line=_undecodable_line(source)) from e
    return frame.fillna("")


def _numeric(frame: pd.DataFrame, columns: List[str], what: str) -> np.ndarray:
    """Columns as float; empty fields become NaN, anything unparsable is a MalformedRow."""
    text = frame[columns].to_numpy(dtype=str)
    stripped = np.char.strip(text)
    empty = stripped == ""
    values = pd.to_numeric(pd.Series(np.where(empty, "nan", stripped).ravel()), errors="coerce")
    values = values.to_numpy(dtype=np.float64).reshape(text.shape)
    bad = ~empty & np.isnan(values) & (np.char.lower(stripped) != "nan")
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise MalformedRow(f"{what}: {columns[col]} is not a number: {text[row, col]!r}", line=int(row) + 2)
    return values


def _check_columns(columns: List[str]) -> None:
    missing = [c for c in FRAME_COLUMNS if c not in columns]
    unknown = [c for c in columns if c not in FRAME_COLUMNS]
    if missing or unknown:
        raise MalformedRow(f"bad header: missing columns {missing[:5]}, unknown columns {unknown[:5]}", line=1)


def check_frame_header(path: str) -> None:
    """Check the header row of a frame file without reading its rows."""
    try:
        columns = pd.read_csv(path, dtype=str, nrows=0).columns
    except pd.errors.EmptyDataError:
        raise MalformedRow("frame file is empty; a header row is required", line=1)
    except UnicodeDecodeError as e:
        raise MalformedRow(f"frame file is not valid UTF-8: {e.reason}", line=_undecodable_line(path)) from e
    _check_columns(list(columns))


def parse_skeleton_file(source: Source) -> List[FrameStream]:
    """
    Parse a frame-record CSV file into validated per-video streams.

    Args:
        source: Path or text/byte stream of the frame-record file

    Returns:
        One FrameStream per video, in order of first appearance; row order preserved

    Raises:
        MalformedRow: On any schema violation, with the file line number
        NonMonotonicFrameIndex: If frame indices of a video do not strictly increase
    """
    frame = _read_csv(source, "frame file")
    _check_columns(list(frame.columns))
    if frame.empty:
        return []

    n = len(frame)
    coords = np.stack([_numeric(frame, coordinate_columns(s), "frame file") for s in range(N_SLOTS)], axis=1)
    flags = np.stack([_numeric(frame, [f"s{s}_present"], "frame file")[:, 0] for s in range(N_SLOTS)], axis=1)
    hand_score = np.stack([_numeric(frame, [f"s{s}_hand_score"], "frame file")[:, 0] for s in range(N_SLOTS)], axis=1)
    det_score = np.stack([_numeric(frame, [f"s{s}_det_score"], "frame file")[:, 0] for s in range(N_SLOTS)], axis=1)
    labels = _numeric(frame, ["label"], "frame file")[:, 0]
    frame_index = _numeric(frame, ["frame_index"], "frame file")[:, 0]

    handedness = np.full((n, N_SLOTS), -2, dtype=np.int8)
    for s in range(N_SLOTS):
        text = np.char.strip(frame[f"s{s}_handedness"].to_numpy(dtype=str))
        handedness[text == "", s] = NO_HAND
        for code, name in enumerate(HANDEDNESS_LABELS):
            handedness[text == name, s] = code

    bad_index = np.isnan(frame_index) | (frame_index < 0) | (np.nan_to_num(frame_index) != np.floor(np.nan_to_num(frame_index)))
    if bad_index.any():
        raise MalformedRow("frame_index must be a non-negative integer", line=int(np.argmax(bad_index)) + 2)

    video_ids = np.char.strip(frame["video_id"].to_numpy(dtype=str))
    worker_ids = np.char.strip(frame["worker_id"].to_numpy(dtype=str))
    blank = (video_ids == "") | (worker_ids == "")
    if blank.any():
        raise MalformedRow("video_id and worker_id are required", line=int(np.argmax(blank)) + 2)

    present, problem = check_frame_arrays(coords, flags, handedness, hand_score, det_score, labels)
    if problem is not None:
        row, error = problem
        raise MalformedRow(str(error), line=row + 2) from error

    xy = coords.reshape(n, N_SLOTS, N_LANDMARKS, N_DIMS)[..., :2]
    out_of_frame = int(((xy < 0.0) | (xy > 1.0)).sum())
    if out_of_frame:
        logger.warning("%d coordinates outside [0, 1] (accepted, not clamped)", out_of_frame)

    streams = []
    for video_id in pd.unique(video_ids):
        rows = np.flatnonzero(video_ids == video_id)
        workers = np.unique(worker_ids[rows])
        if len(workers) != 1:
            raise MalformedRow(f"video {video_id} has several worker ids {list(workers)}", line=int(rows[0]) + 2)
        index = frame_index[rows].astype(np.int64)
        steps = np.flatnonzero(np.diff(index) <= 0)
        if steps.size:
            row = rows[steps[0] + 1]
            raise NonMonotonicFrameIndex(
                f"video {video_id}: frame index {index[steps[0] + 1]} does not follow {index[steps[0]]}",
                line=int(row) + 2,
            )
        mask = present[rows]
        stream_labels = labels[rows]
        streams.append(FrameStream(
            video_id=str(video_id),
            worker_id=str(workers[0]),
            frame_index=index,
            coords=np.where(mask[..., None], coords[rows], np.nan).reshape(len(rows), N_SLOTS, N_LANDMARKS, N_DIMS),
            present=mask,
            handedness=np.where(mask, handedness[rows], NO_HAND).astype(np.int8),
            handedness_score=np.where(mask, hand_score[rows], np.nan),
            detection_score=np.where(mask, det_score[rows], np.nan),
            labels=np.where(np.isnan(stream_labels), UNLABELED, np.nan_to_num(stream_labels)).astype(np.int16),
        ))
    return streams


def parse_label_file(source: Source) -> LabelTable:
    """Parse a label-table CSV (header start_frame, class_id)."""
    frame = _read_csv(source, "label file")
    if list(frame.columns) != LABEL_COLUMNS:
        raise MalformedRow(f"label file header must be {LABEL_COLUMNS}, got {list(frame.columns)}", line=1)
    values = _numeric(frame, LABEL_COLUMNS, "label file")
    bad = np.isnan(values).any(axis=1) | (np.nan_to_num(values) != np.floor(np.nan_to_num(values))).any(axis=1)
    if bad.any():
        raise MalformedRow("start_frame and class_id must be integers", line=int(np.argmax(bad)) + 2)
    entries = [(int(a), int(b)) for a, b in values]
    try:
        return LabelTable(entries=entries)
    except ValueError as e:
        raise MalformedRow(f"label file: {e}") from e


# Writing

def skeleton_frame(stream: FrameStream) -> pd.DataFrame:
    """The stream as a frame-file table (one row per frame)."""
    n = len(stream)
    data = {
        "video_id": np.full(n, stream.video_id),
        "worker_id": np.full(n, stream.worker_id),
        "frame_index": stream.frame_index,
    }
    for s in range(N_SLOTS):
        present = stream.present[:, s]
        names = np.array(HANDEDNESS_LABELS + ("",))
        data[f"s{s}_present"] = present.astype(np.int8)
        data[f"s{s}_handedness"] = names[np.where(present, stream.handedness[:, s], 2)]
        data[f"s{s}_hand_score"] = stream.handedness_score[:, s]
        data[f"s{s}_det_score"] = stream.detection_score[:, s]
        flat = stream.coords[:, s].reshape(n, -1)
        for j, column in enumerate(coordinate_columns(s)):
            data[column] = flat[:, j]
    data["label"] = pd.array(np.where(stream.labels == UNLABELED, None, stream.labels), dtype="Int64")
    return pd.DataFrame(data, columns=FRAME_COLUMNS)


def write_skeleton_file(streams: Sequence[FrameStream], path: str) -> None:
    table = pd.concat([skeleton_frame(s) for s in streams], ignore_index=True)
    table.to_csv(path, index=False, na_rep="", float_format="%.6f", lineterminator="\n")


def write_label_file(table: LabelTable, path: str) -> None:
    frame = pd.DataFrame(table.entries, columns=LABEL_COLUMNS)
    frame.to_csv(path, index=False, lineterminator="\n")


# Labels, frame rate, split

def apply_labels(stream: FrameStream, table: LabelTable) -> FrameStream:
    """
    Label every frame with the class of the greatest start_frame <= frame index.

    Raises:
        EmptyTable: If the table has no entries
        UnlabeledPrefix: If a frame precedes the first start_frame
    """
    if not table.entries:
        raise EmptyTable(f"label table for video {stream.video_id} is empty")
    starts = np.array([start for start, _ in table.entries], dtype=np.int64)
    classes = np.array([c for _, c in table.entries], dtype=np.int16)
    position = np.searchsorted(starts, stream.frame_index, side="right") - 1
    if (position < 0).any():
        first = int(stream.frame_index[np.argmax(position < 0)])
        raise UnlabeledPrefix(
            f"video {stream.video_id}: frame {first} precedes the first label start {int(starts[0])}"
        )
    return stream.with_labels(classes[position])


def emulate_fps(stream: FrameStream, target_fps: int, source_fps: int = SOURCE_FPS) -> FrameStream:
    """
    Emulate a slower camera by keeping frames whose index is a multiple of source/target.

    Raises:
        NonDivisorRate: If target_fps does not divide source_fps
    """
    step = get_decimation(source_fps, target_fps)
    if step == 0:
        raise NonDivisorRate(f"{target_fps} fps does not divide the source rate of {source_fps} fps")
    if step == 1:
        return stream
    return stream.take(stream.frame_index % step == 0)


@dataclass(frozen=True)
class VideoSplit:
    """A labeled video and the position of its first validation frame."""
    stream: FrameStream
    boundary: int

    @property
    def train(self) -> FrameStream:
        return self.stream.take(slice(0, self.boundary))

    @property
    def val(self) -> FrameStream:
        return self.stream.take(slice(self.boundary, None))


def split_train_val(streams: Sequence[FrameStream], ratio: float = 0.8) -> List[VideoSplit]:
    """
    Split every video individually: the first floor(N * ratio) frames train, the rest validate.

    Raises:
        EmptyVideo: If a stream has no frames
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"split ratio must be in (0, 1], got {ratio}")
    splits = []
    for stream in streams:
        if len(stream) == 0:
            raise EmptyVideo(f"video {stream.video_id} has no frames")
        splits.append(VideoSplit(stream=stream, boundary=int(math.floor(len(stream) * ratio))))
    if ratio == 1.0:
        logger.warning("Split ratio 1.0 leaves the validation set empty")
    return splits


# Windows

@dataclass(frozen=True, eq=False)
class InstanceWindow:
    """W consecutive frames of one video, labeled by the most recent frame."""
    features: np.ndarray        # (W, F)
    label: int
    end_frame: int
    video_id: str
    worker_id: str
    imputed_mask: np.ndarray    # (W, 2)


@dataclass(frozen=True, eq=False)
class _VideoFrames:
    frames: SkeletonWindow
    labels: np.ndarray
    frame_index: np.ndarray
    video_id: str
    worker_id: str


class InstanceSet:
    """
    Sliding-window instances over one or more videos, materialized per batch.

    Windows are addressed by (video, end position). With a preprocessing
    pipeline attached, its frame-wise layers run once per video and the
    window-dependent layer runs on each materialized batch, which equals
    running the full pipeline on every window.
    """

    def __init__(
        self,
        videos: List[_VideoFrames],
        video_of: np.ndarray,
        end_position: np.ndarray,
        window_len: int,
        pipeline: Optional[PreprocessPipeline] = None,
    ):
        self.videos = videos
        self.video_of = np.asarray(video_of, dtype=np.int64)
        self.end_position = np.asarray(end_position, dtype=np.int64)
        self.window_len = window_len
        self.pipeline = pipeline

    def __len__(self) -> int:
        return len(self.end_position)

    @property
    def feature_len(self) -> int:
        if self.videos:
            return self.videos[0].frames.feature_len
        return self.pipeline.feature_len if self.pipeline else N_SLOTS * N_LANDMARKS * N_DIMS

    @property
    def labels(self) -> np.ndarray:
        out = np.empty(len(self), dtype=np.int64)
        for v, video in enumerate(self.videos):
            mask = self.video_of == v
            out[mask] = video.labels[self.end_position[mask]]
        return out

    @property
    def end_frames(self) -> np.ndarray:
        out = np.empty(len(self), dtype=np.int64)
        for v, video in enumerate(self.videos):
            mask = self.video_of == v
            out[mask] = video.frame_index[self.end_position[mask]]
        return out

    @property
    def video_ids(self) -> np.ndarray:
        names = np.array([v.video_id for v in self.videos] or [""], dtype=object)
        return names[self.video_of]

    @property
    def worker_ids(self) -> np.ndarray:
        names = np.array([v.worker_id for v in self.videos] or [""], dtype=object)
        return names[self.video_of]

    def subset(self, mask_or_index) -> "InstanceSet":
        return InstanceSet(self.videos, self.video_of[mask_or_index], self.end_position[mask_or_index],
                           self.window_len, self.pipeline)

    def preprocessed(self, pipeline: PreprocessPipeline) -> "InstanceSet":
        """Same windows with the preprocessing layers applied."""
        if self.pipeline is not None:
            raise ValueError("instance set is already preprocessed")
        videos = [
            _VideoFrames(pipeline.prepare_frames(v.frames), v.labels, v.frame_index, v.video_id, v.worker_id)
            for v in self.videos
        ]
        return InstanceSet(videos, self.video_of, self.end_position, self.window_len, pipeline)

    def batch(self, positions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Materialize windows.

        Args:
            positions: Indices into this set

        Returns:
            (features (B, W, F) float32, imputed mask (B, W, 2))
        """
        positions = np.asarray(positions, dtype=np.int64)
        features = np.empty((len(positions), self.window_len, self.feature_len), dtype=np.float32)
        imputed = np.zeros((len(positions), self.window_len, N_SLOTS), dtype=bool)
        offsets = np.arange(-self.window_len + 1, 1)
        for v in np.unique(self.video_of[positions]):
            rows = np.flatnonzero(self.video_of[positions] == v)
            index = self.end_position[positions[rows]][:, None] + offsets[None, :]
            window = self.videos[v].frames.take(index)
            if self.pipeline is not None:
                window = self.pipeline.finish(window)
            features[rows] = window.features()
            imputed[rows] = window.imputed
        return features, imputed

    def window(self, i: int) -> InstanceWindow:
        features, imputed = self.batch(np.array([i]))
        video = self.videos[self.video_of[i]]
        end = self.end_position[i]
        return InstanceWindow(
            features=features[0],
            label=int(video.labels[end]),
            end_frame=int(video.frame_index[end]),
            video_id=video.video_id,
            worker_id=video.worker_id,
            imputed_mask=imputed[0],
        )

    def iter_batches(self, batch_size: int, order: Optional[np.ndarray] = None) -> Iterator[np.ndarray]:
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            yield order[start:start + batch_size]

    @staticmethod
    def concat(sets: Sequence["InstanceSet"], window_len: int) -> "InstanceSet":
        videos, video_of, ends = [], [], []
        pipeline = None
        for s in sets:
            if s.window_len != window_len:
                raise ValueError("cannot concatenate instance sets of different window lengths")
            video_of.append(s.video_of + len(videos))
            ends.append(s.end_position)
            videos.extend(s.videos)
            pipeline = pipeline or s.pipeline
        if not videos:
            return InstanceSet([], np.zeros(0), np.zeros(0), window_len, pipeline)
        return InstanceSet(videos, np.concatenate(video_of), np.concatenate(ends), window_len, pipeline)


def check_history(window_len: int, fps: int, max_history_s: Optional[float]) -> None:
    """Raise HistoryBudgetExceeded when W / fps seconds exceed the history budget."""
    if max_history_s is not None and window_len / fps > max_history_s + 1e-9:
        raise HistoryBudgetExceeded(
            f"window of {window_len} frames at {fps} fps spans {window_len / fps:.3f} s "
            f"> {max_history_s} s"
        )


def build_windows(
    stream: FrameStream,
    window_len: int,
    hop: int = 1,
    fps: int = SOURCE_FPS,
    max_history_s: Optional[float] = None,
) -> InstanceSet:
    """
    One instance per end position t in {W-1, W-1+hop, ...} of a single (downsampled) video.

    Raises:
        StreamTooShort: If the stream has fewer than W frames
        HistoryBudgetExceeded: If W / fps exceeds max_history_s
    """
    if window_len < 1 or hop < 1:
        raise ValueError("window length and hop must be positive")
    check_history(window_len, fps, max_history_s)
    if len(stream) < window_len:
        raise StreamTooShort(f"video {stream.video_id} has {len(stream)} frames < window {window_len}")
    video = _VideoFrames(
        frames=SkeletonWindow.from_stream(stream),
        labels=stream.labels,
        frame_index=stream.frame_index,
        video_id=stream.video_id,
        worker_id=stream.worker_id,
    )
    ends = np.arange(window_len - 1, len(stream), hop)
    return InstanceSet([video], np.zeros(len(ends)), ends, window_len)


# Dataset

class DataConfig(BaseModel):
    """DataBuilder settings: camera rate, instance length and the split protocol."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    fps: int = 30
    window_len: int = Field(default=60, ge=1)
    hop: int = Field(default=1, ge=1)
    split_ratio: float = Field(default=0.8, gt=0.0, le=1.0)
    holdout_workers: List[str] = ["w9"]
    max_history_s: Optional[float] = Field(default=None, gt=0.0)


@dataclass(eq=False)
class DatasetSplit:
    train: InstanceSet
    val: InstanceSet
    holdout: InstanceSet
    split_ratio: float = 0.8


def build_dataset(
    streams: Sequence[FrameStream],
    config: DataConfig,
    pipeline: Optional[PreprocessPipeline] = None,
) -> DatasetSplit:
    """
    Build train / validation / holdout instances from labeled videos.

    Every video is downsampled to config.fps, holdout workers are set aside
    whole, the rest split per video. A window belongs to the split of its
    end frame, so early validation windows reach back into training frames.
    Training windows use config.hop; validation and holdout use hop 1.
    """
    check_history(config.window_len, config.fps, config.max_history_s)
    holdout_workers = set(config.holdout_workers)
    development, holdout = [], []
    for stream in streams:
        if not stream.is_labeled:
            raise UnlabeledPrefix(f"video {stream.video_id} has unlabeled frames")
        downsampled = emulate_fps(stream, config.fps)
        (holdout if stream.worker_id in holdout_workers else development).append(downsampled)

    train_sets, val_sets, holdout_sets = [], [], []
    for split in split_train_val(development, config.split_ratio):
        windows = build_windows(split.stream, config.window_len, 1, config.fps, config.max_history_s)
        ends = windows.end_position
        in_train = ends < split.boundary
        stride_ok = (ends - (config.window_len - 1)) % config.hop == 0
        train_sets.append(windows.subset(in_train & stride_ok))
        val_sets.append(windows.subset(~in_train))
    for stream in holdout:
        holdout_sets.append(build_windows(stream, config.window_len, 1, config.fps, config.max_history_s))

    def finish(sets: List[InstanceSet]) -> InstanceSet:
        combined = InstanceSet.concat(sets, config.window_len)
        return combined.preprocessed(pipeline) if pipeline is not None else combined

    split = DatasetSplit(finish(train_sets), finish(val_sets), finish(holdout_sets), config.split_ratio)
    logger.info(
        "Dataset: %d train, %d validation, %d holdout windows (W=%d @ %d fps)",
        len(split.train), len(split.val), len(split.holdout), config.window_len, config.fps,
    )
    return split
