"""
Pipeline orchestration shared by the CLI and the HTTP app.

Holds the run configuration, loads data directories, wires dataset building,
training and evaluation together, turns search trials into run
configurations and serves frame-by-frame predictions.
"""

import glob
import logging
import os
from collections import deque
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from pipeline.errors import EmptyVideo, NonMonotonicFrameIndex, TrialFailed
from pipeline.hypersearch import Config, Objective, TrialOutcome
from pipeline.ingest_builder import (
    DataConfig,
    DatasetSplit,
    InstanceSet,
    apply_labels,
    build_dataset,
    parse_label_file,
    parse_skeleton_file,
)
from pipeline.nn_core import (
    Model,
    ModelManifest,
    ModelSpec,
    TrainConfig,
    TrainHistory,
    conv1d_spec,
    evaluate,
    lstm_spec,
    predict,
    td_dense_spec,
    train,
)
from pipeline.preprocess import ConstantImpute, PreprocessConfig, PreprocessPipeline, SkeletonWindow
from pipeline.reports import FramePredictions
from pipeline.skeleton_model import FrameRecord, FrameStream
from pipeline_config import SOURCE_FPS, get_decimation

logger = logging.getLogger(__name__)


class ArchitectureConfig(BaseModel):
    """A family plus its depth/width dimensions."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    family: Literal["lstm", "td_dense", "conv1d"] = "td_dense"
    lstm_layers: int = Field(default=1, ge=1)
    lstm_units: int = Field(default=32, ge=1)
    td_layers: int = Field(default=4, ge=0)
    td_units: int = Field(default=32, ge=1)
    dense_layers: int = Field(default=2, ge=0)
    dense_units: int = Field(default=64, ge=1)
    conv_layers: int = Field(default=2, ge=1)
    conv_filters: int = Field(default=32, ge=1)
    conv_kernel: int = Field(default=3, ge=1)
    conv_stride: int = Field(default=1, ge=1)
    conv_padding: Literal["causal", "same"] = "causal"
    conv_double_filters: bool = False
    conv_pool_sections: Optional[int] = None

    def to_spec(self, window_len: int, feature_len: int) -> ModelSpec:
        if self.family == "lstm":
            return lstm_spec(window_len, feature_len, self.lstm_layers, self.lstm_units)
        if self.family == "td_dense":
            return td_dense_spec(window_len, feature_len, self.td_layers, self.td_units,
                                 self.dense_layers, self.dense_units)
        return conv1d_spec(window_len, feature_len, self.conv_layers, self.conv_filters, self.conv_kernel,
                           self.conv_stride, self.conv_padding, self.conv_double_filters,
                           self.conv_pool_sections)


class RunConfig(BaseModel):
    """Every setting of one pipeline run; unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    data_dir: Optional[str] = None
    data: DataConfig = DataConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    model: Optional[ModelSpec] = None
    architecture: Optional[ArchitectureConfig] = None
    train: TrainConfig = TrainConfig()
    seed: int = 0

    @model_validator(mode="after")
    def validate_model_source(self):
        if self.model is not None and self.architecture is not None:
            raise ValueError("give either model or architecture, not both")
        if self.model is not None:
            expected = (self.data.window_len, self.preprocess.feature_len)
            if tuple(self.model.input_shape) != expected:
                raise ValueError(f"model input_shape {tuple(self.model.input_shape)} != (window_len, "
                                 f"feature_len) {expected}")
        return self

    def model_spec(self) -> ModelSpec:
        if self.model is not None:
            return self.model
        architecture = self.architecture or ArchitectureConfig()
        return architecture.to_spec(self.data.window_len, self.preprocess.feature_len)

    def manifest(self) -> ModelManifest:
        return ModelManifest(preprocess=self.preprocess, fps=self.data.fps, window_len=self.data.window_len)

    def with_seed(self, seed: int) -> "RunConfig":
        return self.model_copy(update={"seed": seed, "train": self.train.model_copy(update={"seed": seed})})


ARCHITECTURE_DIMS = set(ArchitectureConfig.model_fields) - {"conv_pool_sections"}


def run_config_from_trial(config: Config, base: RunConfig, seed: int) -> RunConfig:
    """Overlay a sampled search configuration on a base run configuration."""
    data = base.data.model_copy(update={k: config[k] for k in ("fps", "window_len", "hop") if k in config})
    preprocess_updates: Dict[str, Any] = {k: config[k] for k in ("reduce", "normalize") if k in config}
    if "swap_enabled" in config:
        preprocess_updates["swap_enabled"] = config["swap_enabled"]
    if "impute_value" in config:
        preprocess_updates["impute"] = ConstantImpute(value=config["impute_value"])
    preprocess = base.preprocess.model_copy(update=preprocess_updates)

    architecture = (base.architecture or ArchitectureConfig()).model_dump()
    architecture.update({k: v for k, v in config.items() if k in ARCHITECTURE_DIMS})
    if "conv_pool" in config:
        architecture["conv_pool_sections"] = config.get("conv_pool_sections") if config["conv_pool"] else None

    plateau = base.train.plateau
    if "plateau_patience" in config:
        plateau = plateau.model_copy(update={"patience": config["plateau_patience"]})
    train_config = base.train.model_copy(update={
        **{k: config[k] for k in ("learning_rate", "batch_size", "epochs") if k in config},
        "plateau": plateau,
        "seed": seed,
    })
    return RunConfig.model_validate({
        "data_dir": base.data_dir,
        "data": data.model_dump(),
        "preprocess": preprocess.model_dump(),
        "architecture": architecture,
        "train": train_config.model_dump(),
        "seed": seed,
    })


def load_streams(data_dir: str) -> List[FrameStream]:
    """
    Load every frames/<video>.csv of a data directory, labeled by
    labels/<video>.csv when present and by the embedded labels otherwise.
    """
    paths = sorted(glob.glob(os.path.join(data_dir, "frames", "*.csv")))
    if not paths:
        raise EmptyVideo(f"no frame files under {os.path.join(data_dir, 'frames')}")
    streams = []
    for path in paths:
        for stream in parse_skeleton_file(path):
            label_path = os.path.join(data_dir, "labels", f"{stream.video_id}.csv")
            if os.path.exists(label_path):
                stream = apply_labels(stream, parse_label_file(label_path))
            streams.append(stream)
    logger.info("Loaded %d videos (%d frames) from %s", len(streams), sum(len(s) for s in streams), data_dir)
    return streams


def frame_predictions(model: Model, instances: InstanceSet, batch_size: int = 256) -> FramePredictions:
    """Window predictions aligned to their end frames, sorted by video and frame."""
    result = evaluate(model, instances, batch_size)
    table = pd.DataFrame({
        "video_id": instances.video_ids.astype(str),
        "worker_id": instances.worker_ids.astype(str),
        "frame": instances.end_frames,
        "predicted": result.predictions,
        "label": result.labels,
    }).sort_values(["video_id", "frame"], kind="stable")
    return FramePredictions(
        video_id=table["video_id"].to_numpy(),
        worker_id=table["worker_id"].to_numpy(),
        frame=table["frame"].to_numpy(),
        predicted=table["predicted"].to_numpy(),
        label=table["label"].to_numpy(),
    )


class PipelineService:
    """
    Runs the pipeline for one RunConfig.

    Data flows ingest -> fps emulation -> split -> preprocessing -> windows
    -> model, exactly as the search objective and the CLI need it.
    """

    def __init__(self, config: RunConfig):
        self.config = config

    def preprocess_pipeline(self) -> PreprocessPipeline:
        return PreprocessPipeline(self.config.preprocess)

    def dataset(self, streams: List[FrameStream]) -> DatasetSplit:
        return build_dataset(streams, self.config.data, self.preprocess_pipeline())

    def fit(self, split: DatasetSplit) -> Tuple[Model, TrainHistory]:
        return train(self.config.model_spec(), split.train, split.val, self.config.train, self.config.manifest())

    def run(self, streams: List[FrameStream]) -> Tuple[Model, TrainHistory, DatasetSplit]:
        split = self.dataset(streams)
        model, history = self.fit(split)
        return model, history, split


def model_data_config(model: Model, base: DataConfig) -> DataConfig:
    """Data settings of a trained model: its fps and window on the base split protocol."""
    if model.manifest is None:
        return base
    return base.model_copy(update={"fps": model.manifest.fps, "window_len": model.manifest.window_len})


def evaluation_frames(
    model: Model,
    streams: List[FrameStream],
    data: DataConfig,
    split: Literal["holdout", "val", "all"] = "holdout",
) -> FramePredictions:
    """Frame predictions of the chosen evaluation set."""
    pipeline = PreprocessPipeline(model.manifest.preprocess if model.manifest else PreprocessConfig())
    dataset = build_dataset(streams, model_data_config(model, data), pipeline)
    if split == "holdout":
        instances = dataset.holdout
    elif split == "val":
        instances = dataset.val
    else:
        instances = InstanceSet.concat([dataset.val, dataset.holdout], dataset.val.window_len)
    if len(instances) == 0:
        raise EmptyVideo(f"the {split} set has no windows")
    return frame_predictions(model, instances)


def make_objective(streams: List[FrameStream], base: RunConfig) -> Objective:
    """Search objective: validation accuracy of a trained config."""
    def objective(config: Config, seed: int) -> TrialOutcome:
        run = run_config_from_trial(config, base, seed)
        model, _, split = PipelineService(run).run(streams)
        if len(split.val) == 0:
            raise TrialFailed("no validation windows")
        result = evaluate(model, split.val)
        return TrialOutcome(val_accuracy=result.accuracy, val_loss=result.loss, param_count=model.param_count)
    return objective


# Streaming prediction

@dataclass(frozen=True)
class StreamPrediction:
    video_id: str
    frame_index: int
    status: Literal["ok", "held", "insufficient_history"]
    predicted: Optional[int]
    probabilities: Optional[np.ndarray]


class StreamingPredictor:
    """
    Frame-by-frame prediction with a rolling window.

    Frames dropped by the model's frame-rate decimation repeat the latest
    prediction ("held"). Until W frames have been kept, rows carry the
    insufficient_history status. Frame-wise preprocessing runs once per
    kept frame; the window-dependent part runs on every window.
    """

    def __init__(self, model: Model, source_fps: int = SOURCE_FPS):
        if model.manifest is None:
            raise ValueError("model has no preprocessing manifest")
        self.model = model
        self.manifest = model.manifest
        self.decimation = get_decimation(source_fps, self.manifest.fps)
        if self.decimation == 0:
            raise ValueError(f"model rate {self.manifest.fps} fps does not divide {source_fps} fps")
        self.pipeline = PreprocessPipeline(self.manifest.preprocess)
        self.frames: deque = deque(maxlen=self.manifest.window_len)
        self.video_id: Optional[str] = None
        self.last: Optional[StreamPrediction] = None
        self.last_index: Dict[str, int] = {}

    def reset(self) -> None:
        self.frames.clear()
        self.last = None

    def push(self, record: FrameRecord, line: Optional[int] = None) -> StreamPrediction:
        """
        Predict one frame.

        Raises:
            NonMonotonicFrameIndex: If the frame index does not exceed the
                previous one of the same video
        """
        previous = self.last_index.get(record.video_id)
        if previous is not None and record.frame_index <= previous:
            raise NonMonotonicFrameIndex(
                f"video {record.video_id}: frame index {record.frame_index} does not follow {previous}", line=line)
        self.last_index[record.video_id] = record.frame_index
        if record.video_id != self.video_id:
            self.reset()
            self.video_id = record.video_id
        if record.frame_index % self.decimation != 0:
            if self.last is None or self.last.status == "insufficient_history":
                return StreamPrediction(record.video_id, record.frame_index, "insufficient_history", None, None)
            return StreamPrediction(record.video_id, record.frame_index, "held",
                                    self.last.predicted, self.last.probabilities)

        frame = SkeletonWindow.from_stream(FrameStream.from_records([record]))
        self.frames.append(self.pipeline.prepare_frames(frame))
        if len(self.frames) < self.manifest.window_len:
            self.last = StreamPrediction(record.video_id, record.frame_index, "insufficient_history", None, None)
            return self.last

        window = SkeletonWindow(*(np.concatenate(parts) for parts in zip(*(
            (f.coords, f.present, f.handedness, f.handedness_score, f.imputed) for f in self.frames
        ))))
        features = self.pipeline.finish(window).features()
        predicted, probabilities = predict(self.model, features)
        self.last = StreamPrediction(record.video_id, record.frame_index, "ok", predicted, probabilities)
        return self.last

    def run(self, records: Iterable[FrameRecord]) -> Iterable[StreamPrediction]:
        for record in records:
            yield self.push(record)
