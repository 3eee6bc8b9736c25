"""
The four preprocessing layers, applied in order:

1. hand swapping     - slot 0 holds the Left hand, slot 1 the Right hand
2. imputation        - absent hands become a sentinel constant
3. dimension reduction - full skeleton, center of gravity or five points
4. normalization     - image absolute, on the most recent skeleton, or per skeleton

All layers work on SkeletonWindow arrays with arbitrary leading axes, so the
same function handles one window (T, ...), a batch of windows (B, T, ...) or a
whole video treated as one long window. Layers 1-3 are frame-wise.
"""

import dataclasses
import logging
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from pipeline.skeleton_model import FrameStream, ReductionMode, reduce_points
from pipeline_config import N_DIMS, N_SLOTS, NO_HAND, get_feature_length

logger = logging.getLogger(__name__)

NormalizationMode = Literal["image_absolute", "on_most_recent", "per_skeleton"]


class ConstantImpute(BaseModel):
    """Fill absent hands with one constant value."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["constant"] = "constant"
    value: float = 2.0


class PreprocessConfig(BaseModel):
    """Settings of the four preprocessing layers."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    swap_enabled: bool = True
    impute: ConstantImpute = ConstantImpute()
    reduce: ReductionMode = "full"
    normalize: NormalizationMode = "per_skeleton"
    epsilon: float = Field(default=1e-6, gt=0.0)

    @property
    def feature_len(self) -> int:
        return get_feature_length(self.reduce)


@dataclass
class PreprocessStats:
    """Counters reported by the layers instead of raising."""
    no_reference: int = 0


@dataclass(frozen=True, eq=False)
class SkeletonWindow:
    """
    Skeleton arrays of one or more windows.

    Shapes (leading axes "..." are free):
        coords            (..., T, 2, P, 3)
        present           (..., T, 2)   hand detected in the source frame
        handedness        (..., T, 2)   0 Left, 1 Right, NO_HAND absent
        handedness_score  (..., T, 2)
        imputed           (..., T, 2)   slot values are the imputation constant
    """
    coords: np.ndarray
    present: np.ndarray
    handedness: np.ndarray
    handedness_score: np.ndarray
    imputed: np.ndarray

    @property
    def points_per_hand(self) -> int:
        return self.coords.shape[-2]

    @property
    def feature_len(self) -> int:
        return N_SLOTS * self.points_per_hand * N_DIMS

    def replace(self, **changes) -> "SkeletonWindow":
        return dataclasses.replace(self, **changes)

    def take(self, index) -> "SkeletonWindow":
        """Index the first (frame) axis; a (B, W) index yields B windows."""
        return SkeletonWindow(
            coords=self.coords[index],
            present=self.present[index],
            handedness=self.handedness[index],
            handedness_score=self.handedness_score[index],
            imputed=self.imputed[index],
        )

    def features(self) -> np.ndarray:
        """Flatten to (..., T, F): slot 0 then slot 1, x/y/z per landmark."""
        return self.coords.reshape(self.coords.shape[:-3] + (self.feature_len,))

    @classmethod
    def from_stream(cls, stream: FrameStream) -> "SkeletonWindow":
        return cls(
            coords=stream.coords,
            present=stream.present,
            handedness=stream.handedness,
            handedness_score=stream.handedness_score,
            imputed=np.zeros_like(stream.present),
        )


def swap_hands(window: SkeletonWindow) -> SkeletonWindow:
    """
    Put the Left hand in slot 0 and the Right hand in slot 1.

    When both hands claim the same side, the higher handedness score keeps the
    claim (slot 0 on equal scores) and the other hand takes the opposite slot.
    A single hand moves to the slot it claims.
    """
    p0, p1 = window.present[..., 0], window.present[..., 1]
    c0, c1 = window.handedness[..., 0], window.handedness[..., 1]
    scores = np.nan_to_num(window.handedness_score, nan=-1.0)
    slot0_wins = scores[..., 0] >= scores[..., 1]

    both = p0 & p1
    same_side = both & (c0 == c1)
    swap = np.where(
        same_side,
        np.where(slot0_wins, c0 == 1, c1 == 0),
        np.where(both, c0 == 1, (p0 & ~p1 & (c0 == 1)) | (p1 & ~p0 & (c1 == 0))),
    )

    def exchange(array: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return np.where(mask, array[..., ::-1], array)

    slot_mask = swap[..., None]
    coords = np.where(swap[..., None, None, None], window.coords[..., ::-1, :, :], window.coords)
    present = exchange(window.present, slot_mask)
    handedness = np.where(present, np.array([0, 1], dtype=window.handedness.dtype), NO_HAND)
    return SkeletonWindow(
        coords=coords,
        present=present,
        handedness=handedness.astype(window.handedness.dtype),
        handedness_score=exchange(window.handedness_score, slot_mask),
        imputed=exchange(window.imputed, slot_mask),
    )


def impute(window: SkeletonWindow, strategy: ConstantImpute) -> SkeletonWindow:
    """Replace every absent slot with the strategy constant and flag it."""
    absent = ~window.present
    if not absent.any():
        return window
    value = np.asarray(strategy.value, dtype=window.coords.dtype)
    coords = np.where(absent[..., None, None], value, window.coords)
    return window.replace(coords=coords, imputed=window.imputed | absent)


def reduce_dims(window: SkeletonWindow, mode: ReductionMode) -> SkeletonWindow:
    """Reduce every slot to the points of the given mode; imputed slots keep the constant."""
    if mode == "full":
        return window
    reduced = reduce_points(window.coords, mode)
    constant = np.broadcast_to(window.coords[..., :1, :], reduced.shape)
    coords = np.where(window.imputed[..., None, None], constant, reduced)
    return window.replace(coords=coords.astype(window.coords.dtype, copy=False))


def _center_and_scale(points: np.ndarray):
    centroid = points.mean(axis=-2, keepdims=True)
    extent = (points.max(axis=-2) - points.min(axis=-2)).max(axis=-1)[..., None, None]
    return centroid, extent


def _apply_transform(points, centroid, extent, epsilon, translate_degenerate=False):
    degenerate = extent < epsilon
    scaled = (points - centroid) / np.where(degenerate, 1.0, extent)
    if translate_degenerate:
        return scaled
    return np.where(degenerate, 0.0, scaled)


def normalize(
    window: SkeletonWindow,
    mode: NormalizationMode,
    epsilon: float = 1e-6,
    stats: Optional[PreprocessStats] = None,
) -> SkeletonWindow:
    """
    Normalize detected (non-imputed) skeletons.

    image_absolute leaves coordinates untouched. per_skeleton centers every
    skeleton on its centroid and divides by its extent (max over axes of
    max - min). on_most_recent uses, per slot, the most recent detected
    skeleton of the window as the reference for all frames. per_skeleton
    extents below epsilon map to zeros; an on_most_recent reference below
    epsilon (a single center-of-gravity point) only translates. Imputed
    slots pass through byte-identical.
    """
    if mode == "image_absolute":
        return window

    usable = window.present & ~window.imputed
    points = window.coords.astype(np.float64)

    if mode == "per_skeleton":
        centroid, extent = _center_and_scale(points)
        normed = _apply_transform(points, centroid, extent, epsilon)
    elif mode == "on_most_recent":
        frames = usable.shape[-2]
        has_reference = usable.any(axis=-2)
        last = frames - 1 - np.argmax(usable[..., ::-1, :], axis=-2)
        reference = np.take_along_axis(points, last[..., None, :, None, None], axis=-4)
        centroid, extent = _center_and_scale(reference)
        normed = _apply_transform(points, centroid, extent, epsilon, translate_degenerate=True)
        missing = int((~has_reference).sum())
        if missing:
            logger.debug("%d window slots without a reference skeleton", missing)
            if stats is not None:
                stats.no_reference += missing
    else:
        raise ValueError(f"Unsupported normalization mode: {mode}")

    coords = np.where(usable[..., None, None], normed.astype(window.coords.dtype), window.coords)
    return window.replace(coords=coords)


class PreprocessPipeline:
    """
    Runs the four layers in their fixed order.

    prepare_frames() runs everything that is frame-wise and can be done once
    per video; finish() runs what depends on the window (on_most_recent
    normalization). apply() on a single window runs both.
    """

    def __init__(self, config: PreprocessConfig):
        self.config = config
        self.stats = PreprocessStats()

    @property
    def feature_len(self) -> int:
        return self.config.feature_len

    @property
    def window_dependent(self) -> bool:
        return self.config.normalize == "on_most_recent"

    def prepare_frames(self, window: SkeletonWindow) -> SkeletonWindow:
        if self.config.swap_enabled:
            window = swap_hands(window)
        window = impute(window, self.config.impute)
        window = reduce_dims(window, self.config.reduce)
        if not self.window_dependent:
            window = normalize(window, self.config.normalize, self.config.epsilon, self.stats)
        return window

    def finish(self, window: SkeletonWindow) -> SkeletonWindow:
        if self.window_dependent:
            window = normalize(window, self.config.normalize, self.config.epsilon, self.stats)
        return window

    def apply(self, window: SkeletonWindow) -> SkeletonWindow:
        return self.finish(self.prepare_frames(window))
