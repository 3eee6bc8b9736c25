"""
Deterministic generator of labeled two-hand skeleton streams.

Every motion class has a parametric prototype: both hands sweep around a
class-specific workspace center with class-specific frequency, amplitude,
depth and finger articulation. Workers perform a cyclic class grammar with
their own speed, amplitude and noise; hands drop out per slot and frame,
handedness labels are occasionally wrong and slot order is as detected.
"""

import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from pipeline.errors import InvalidSpec
from pipeline.ingest_builder import LabelTable, write_label_file, write_skeleton_file
from pipeline.skeleton_model import FrameStream
from pipeline_config import N_CLASSES, N_DIMS, N_LANDMARKS, N_SLOTS, NO_HAND

logger = logging.getLogger(__name__)

# Finger rays of the articulation template (radians from "up"), thumb to pinky
FINGER_ANGLES = np.array([-1.05, -0.35, 0.0, 0.35, 0.7])
JOINT_REACH = np.array([0.4, 0.65, 0.85, 1.0])      # cumulative, per joint
HAND_SIZE = 0.08
HAND_OFFSET = np.array([0.12, 0.02])                  # right hand sits at +offset, left at -offset


class ClassPrototype(BaseModel):
    """Trajectory parameters of one motion class."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    center: Tuple[float, float]
    frequency_hz: float = Field(gt=0.0)
    amplitude: float = Field(ge=0.0)
    depth: float = 0.0
    depth_amplitude: float = Field(default=0.02, ge=0.0)
    curl: float = Field(default=0.2, ge=0.0, le=1.0)
    rotation: float = 0.0


class SegmentDuration(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mean_s: float = Field(gt=0.0)
    jitter: float = Field(default=0.2, ge=0.0, lt=1.0)   # uniform +-jitter * mean


class WorkerJitter(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    speed_spread: float = Field(default=0.1, ge=0.0, lt=1.0)
    amplitude_spread: float = Field(default=0.1, ge=0.0, lt=1.0)
    noise_sigma: float = Field(default=0.005, ge=0.0)


class SloppyPreset(BaseModel):
    """Multipliers applied to the sloppy workers."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    noise_factor: float = Field(default=4.0, ge=1.0)
    amplitude_factor: float = Field(default=1.5, gt=0.0)
    error_factor: float = Field(default=3.0, ge=1.0)


def default_prototypes() -> List[ClassPrototype]:
    prototypes = [ClassPrototype(center=(0.5, 0.5), frequency_hz=2.5, amplitude=0.06, depth=-0.02, curl=0.6)]
    for c in range(1, N_CLASSES):
        angle = 2 * math.pi * (c - 1) / (N_CLASSES - 1)
        prototypes.append(ClassPrototype(
            center=(round(0.5 + 0.28 * math.cos(angle), 4), round(0.5 + 0.28 * math.sin(angle), 4)),
            frequency_hz=round(0.4 + 0.15 * c, 3),
            amplitude=round(0.02 + 0.006 * (c % 3), 4),
            depth=round(-0.06 + 0.012 * c, 4),
            curl=round(0.1 * (c % 5), 2),
            rotation=round(0.25 * (c - 5), 3),
        ))
    return prototypes


DEFAULT_DURATIONS_S = {0: 1.0, 1: 3.0, 2: 1.5, 3: 2.0, 4: 1.5, 5: 4.0, 6: 2.5, 7: 2.0, 8: 1.5, 9: 3.0}


def default_durations() -> List[SegmentDuration]:
    return [SegmentDuration(mean_s=DEFAULT_DURATIONS_S[c]) for c in range(N_CLASSES)]


class SynthSpec(BaseModel):
    """Configuration of the synthetic generator; defaults mimic the assembly dataset at desk scale."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_classes: int = N_CLASSES
    n_workers: int = Field(default=9, ge=1)
    fps: int = Field(default=30, ge=1)
    minutes_per_worker: float = Field(default=2.0, gt=0.0)
    prototypes: List[ClassPrototype] = Field(default_factory=default_prototypes)
    durations: List[SegmentDuration] = Field(default_factory=default_durations)
    # scan, check, pack three times over, then box handling
    cycle_grammar: List[int] = [1, 2, 3, 4, 2, 3, 4, 2, 3, 4, 5, 6, 7, 8, 9]
    error_prob: float = Field(default=0.05, ge=0.0, le=1.0)
    dropout_prob: float = Field(default=0.1, ge=0.0, le=1.0)
    handedness_flip_prob: float = Field(default=0.02, ge=0.0, le=1.0)
    slot_shuffle: bool = True
    worker_jitter: WorkerJitter = WorkerJitter()
    sloppy_workers: List[str] = ["w4"]
    sloppy: SloppyPreset = SloppyPreset()
    holdout_worker: Optional[str] = "w9"

    @field_validator("n_classes")
    @classmethod
    def validate_classes(cls, v):
        if v != N_CLASSES:
            raise ValueError(f"n_classes must be {N_CLASSES}")
        return v

    def check(self) -> None:
        """Cross-field checks; raises InvalidSpec."""
        if len(self.prototypes) != self.n_classes or len(self.durations) != self.n_classes:
            raise InvalidSpec(f"need one prototype and one duration per class ({self.n_classes})")
        if not self.cycle_grammar:
            raise InvalidSpec("cycle grammar must not be empty")
        if any(not 1 <= c < self.n_classes for c in self.cycle_grammar):
            raise InvalidSpec("cycle grammar may only use classes 1..9")
        cyclic = self.cycle_grammar + self.cycle_grammar[:1]
        if len(self.cycle_grammar) > 1 and any(a == b for a, b in zip(cyclic, cyclic[1:])):
            raise InvalidSpec("cycle grammar repeats a class back to back")
        if len(self.cycle_grammar) == 1:
            raise InvalidSpec("cycle grammar needs at least two classes")

    def worker_ids(self) -> List[str]:
        return [f"w{i + 1}" for i in range(self.n_workers)]


class SynthStats(BaseModel):
    """Analytic expectations of the generator output for a regular worker."""
    mean_segment_s: Dict[int, float]
    expected_cycle_s: float
    cycle_grammar: List[int]
    dropout_rate: float
    error_prob: float
    frames_per_worker: int


def _mean_inverse_speed(spread: float) -> float:
    """E[1 / s] for s uniform on [1 - spread, 1 + spread]."""
    if spread == 0:
        return 1.0
    return math.log((1 + spread) / (1 - spread)) / (2 * spread)


def describe(spec: SynthSpec) -> SynthStats:
    spec.check()
    inverse_speed = _mean_inverse_speed(spec.worker_jitter.speed_spread)
    means = {c: spec.durations[c].mean_s * inverse_speed for c in range(spec.n_classes)}
    cycle = sum(means[c] for c in spec.cycle_grammar) + spec.error_prob * len(spec.cycle_grammar) * means[0]
    return SynthStats(
        mean_segment_s=means,
        expected_cycle_s=cycle,
        cycle_grammar=list(spec.cycle_grammar),
        dropout_rate=spec.dropout_prob,
        error_prob=spec.error_prob,
        frames_per_worker=int(round(spec.minutes_per_worker * 60 * spec.fps)),
    )


@dataclass(frozen=True)
class WorkerProfile:
    worker_id: str
    speed: float
    amplitude: float
    noise_sigma: float
    error_prob: float


def _worker_profile(spec: SynthSpec, worker_id: str, rng: np.random.Generator) -> WorkerProfile:
    jitter = spec.worker_jitter
    speed = 1 + rng.uniform(-jitter.speed_spread, jitter.speed_spread)
    amplitude = 1 + rng.uniform(-jitter.amplitude_spread, jitter.amplitude_spread)
    noise, error_prob = jitter.noise_sigma, spec.error_prob
    if worker_id in spec.sloppy_workers:
        noise *= spec.sloppy.noise_factor
        amplitude *= spec.sloppy.amplitude_factor
        error_prob = min(1.0, error_prob * spec.sloppy.error_factor)
    return WorkerProfile(worker_id, speed, amplitude, noise, error_prob)


def _label_track(spec: SynthSpec, profile: WorkerProfile, n_frames: int, rng: np.random.Generator):
    """Segments (class, start, length) following the grammar, plus cycle start frames."""
    segments: List[Tuple[int, int, int]] = []
    cycle_starts: List[int] = []
    position = 0

    def add(cls: int) -> None:
        nonlocal position
        duration = spec.durations[cls]
        seconds = duration.mean_s * (1 + duration.jitter * rng.uniform(-1, 1)) / profile.speed
        length = max(1, int(round(seconds * spec.fps)))
        segments.append((cls, position, min(length, n_frames - position)))
        position += length

    while position < n_frames:
        for step, cls in enumerate(spec.cycle_grammar):
            if position >= n_frames:
                break
            if rng.random() < profile.error_prob:
                add(0)
                if position >= n_frames:
                    break
            if step == 0:
                cycle_starts.append(position)
            add(cls)
    return segments, cycle_starts


def _hand_template(curl: np.ndarray, rotation: np.ndarray, mirror: float) -> np.ndarray:
    """Landmark offsets from the wrist, (N, 21, 3)."""
    n = len(curl)
    offsets = np.zeros((n, N_LANDMARKS, N_DIMS))
    joint = np.arange(4)
    for finger, base_angle in enumerate(FINGER_ANGLES):
        angle = mirror * base_angle + rotation[:, None]                       # (N, 1)
        reach = JOINT_REACH[None, :] * (1 - 0.5 * curl[:, None] * (joint[None, :] + 1) / 4)
        index = 1 + 4 * finger + joint
        offsets[:, index, 0] = mirror * HAND_SIZE * reach * np.sin(angle)
        offsets[:, index, 1] = -HAND_SIZE * reach * np.cos(angle)
        offsets[:, index, 2] = -0.01 * (joint[None, :] + 1) * (1 + curl[:, None])
    return offsets


def _trajectories(spec: SynthSpec, profile: WorkerProfile, labels: np.ndarray, local_t: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    """True hand skeletons, (N, 2, 21, 3) with hand 0 Left and hand 1 Right."""
    centers = np.array([p.center for p in spec.prototypes])[labels]
    frequency = np.array([p.frequency_hz for p in spec.prototypes])[labels]
    amplitude = np.array([p.amplitude for p in spec.prototypes])[labels] * profile.amplitude
    depth = np.array([p.depth for p in spec.prototypes])[labels]
    depth_amplitude = np.array([p.depth_amplitude for p in spec.prototypes])[labels]
    curl_base = np.array([p.curl for p in spec.prototypes])[labels]
    rotation = np.array([p.rotation for p in spec.prototypes])[labels]

    phase = 2 * math.pi * frequency * local_t * profile.speed
    curl = np.clip(curl_base * (0.75 + 0.25 * np.sin(phase)), 0.0, 1.0)
    hands = np.empty((len(labels), N_SLOTS, N_LANDMARKS, N_DIMS))
    for hand, mirror in ((0, -1.0), (1, 1.0)):
        shift = phase + (math.pi if hand == 0 else 0.0)
        wrist = np.stack([
            centers[:, 0] + mirror * HAND_OFFSET[0] + amplitude * np.cos(shift),
            centers[:, 1] + HAND_OFFSET[1] + amplitude * np.sin(2 * shift) / 2,
            depth + depth_amplitude * np.sin(shift),
        ], axis=1)
        hands[:, hand] = wrist[:, None, :] + _hand_template(curl, rotation, mirror)
    hands += rng.normal(0.0, profile.noise_sigma, size=hands.shape) if profile.noise_sigma else 0.0
    return hands


def _generate_worker(spec: SynthSpec, index: int, seed_sequence: np.random.SeedSequence):
    worker_id = spec.worker_ids()[index]
    video_id = f"v{index + 1}"
    rng = np.random.default_rng(seed_sequence)
    profile = _worker_profile(spec, worker_id, rng)
    n_frames = int(round(spec.minutes_per_worker * 60 * spec.fps))
    segments, cycle_starts = _label_track(spec, profile, n_frames, rng)

    labels = np.empty(n_frames, dtype=np.int16)
    local_t = np.empty(n_frames)
    for cls, start, length in segments:
        labels[start:start + length] = cls
        local_t[start:start + length] = np.arange(length) / spec.fps

    hands = _trajectories(spec, profile, labels.astype(np.int64), local_t, rng)

    present = rng.random((n_frames, N_SLOTS)) >= spec.dropout_prob
    handedness = np.broadcast_to(np.array([0, 1], dtype=np.int8), (n_frames, N_SLOTS)).copy()
    flipped = rng.random((n_frames, N_SLOTS)) < spec.handedness_flip_prob
    handedness = np.where(flipped, 1 - handedness, handedness).astype(np.int8)
    hand_score = np.where(flipped, rng.uniform(0.5, 0.7, (n_frames, N_SLOTS)),
                          rng.uniform(0.85, 1.0, (n_frames, N_SLOTS)))
    det_score = rng.uniform(0.8, 1.0, (n_frames, N_SLOTS))

    if spec.slot_shuffle:
        swap = rng.random(n_frames) < 0.5
        order = np.where(swap[:, None], [1, 0], [0, 1])
        rows = np.arange(n_frames)[:, None]
        hands, present = hands[rows, order], present[rows, order]
        handedness, hand_score, det_score = handedness[rows, order], hand_score[rows, order], det_score[rows, order]

    stream = FrameStream(
        video_id=video_id,
        worker_id=worker_id,
        frame_index=np.arange(n_frames, dtype=np.int64),
        coords=np.where(present[..., None, None], hands, np.nan),
        present=present,
        handedness=np.where(present, handedness, NO_HAND).astype(np.int8),
        handedness_score=np.where(present, hand_score, np.nan),
        detection_score=np.where(present, det_score, np.nan),
        labels=labels,
    )
    table = LabelTable(entries=[(start, cls) for cls, start, _ in segments])

    segment_rows = [
        {
            "worker_id": worker_id, "video_id": video_id, "class_id": cls,
            "start_frame": start, "end_frame": start + length - 1,
            "duration_s": length / spec.fps, "truncated": start + length >= n_frames,
        }
        for cls, start, length in segments
    ]
    cycle_rows = [
        {
            "worker_id": worker_id, "video_id": video_id, "cycle": i,
            "start_frame": a, "duration_s": (b - a) / spec.fps,
        }
        for i, (a, b) in enumerate(zip(cycle_starts, cycle_starts[1:]))
    ]
    return stream, table, segment_rows, cycle_rows


@dataclass(eq=False)
class SynthOutput:
    streams: List[FrameStream]
    label_tables: Dict[str, LabelTable]
    segments: pd.DataFrame
    cycles: pd.DataFrame

    def stream_for(self, worker_id: str) -> FrameStream:
        return next(s for s in self.streams if s.worker_id == worker_id)


SEGMENT_COLUMNS = ["worker_id", "video_id", "class_id", "start_frame", "end_frame", "duration_s", "truncated"]
CYCLE_COLUMNS = ["worker_id", "video_id", "cycle", "start_frame", "duration_s"]


def generate(spec: SynthSpec = SynthSpec(), seed: int = 0) -> SynthOutput:
    """
    Generate one labeled video per worker plus the ground-truth sheet.

    Workers draw from disjoint seed streams spawned from the seed, so the
    output depends only on (spec, seed).

    Raises:
        InvalidSpec: On inconsistent prototypes, durations or grammar
    """
    spec.check()
    children = np.random.SeedSequence(seed).spawn(spec.n_workers)
    streams, tables, segment_rows, cycle_rows = [], {}, [], []
    for index, child in enumerate(children):
        stream, table, segments, cycles = _generate_worker(spec, index, child)
        streams.append(stream)
        tables[stream.video_id] = table
        segment_rows += segments
        cycle_rows += cycles
        logger.info("Generated %s: %d frames, %d segments", stream.worker_id, len(stream), len(segments))
    return SynthOutput(
        streams=streams,
        label_tables=tables,
        segments=pd.DataFrame(segment_rows, columns=SEGMENT_COLUMNS),
        cycles=pd.DataFrame(cycle_rows, columns=CYCLE_COLUMNS),
    )


def write_dataset(output: SynthOutput, spec: SynthSpec, seed: int, directory: str) -> List[str]:
    """
    Write a data directory: frames/<video>.csv, labels/<video>.csv, the
    ground-truth sheets and the spec used.
    """
    os.makedirs(os.path.join(directory, "frames"), exist_ok=True)
    os.makedirs(os.path.join(directory, "labels"), exist_ok=True)
    written = []
    for stream in output.streams:
        path = os.path.join(directory, "frames", f"{stream.video_id}.csv")
        write_skeleton_file([stream], path)
        written.append(path)
        path = os.path.join(directory, "labels", f"{stream.video_id}.csv")
        write_label_file(output.label_tables[stream.video_id], path)
        written.append(path)
    for name, table in (("ground_truth_segments.csv", output.segments), ("ground_truth_cycles.csv", output.cycles)):
        path = os.path.join(directory, name)
        table.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
        written.append(path)
    path = os.path.join(directory, "synth_spec.json")
    with open(path, "w") as handle:
        json.dump({"seed": seed, "spec": spec.model_dump(mode="json")}, handle, indent=2, sort_keys=True)
        handle.write("\n")
    written.append(path)
    return written
