"""Frame and stream factories shared by the tests."""

from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from pipeline.skeleton_model import FRAME_COLUMNS, FrameStream, coordinate_columns

# Coordinates are multiples of 2**-10 so float32 comparisons stay exact.
STEP = 2.0 ** -10


def slot_points(base: float = 0.5, spread: float = 1.0) -> np.ndarray:
    """A (21, 3) skeleton with distinct, exactly representable points."""
    i = np.arange(21)
    return np.stack([base + spread * STEP * i, base - spread * STEP * i, -STEP * (i % 4)], axis=1)


def make_row(
    video_id: str = "v1",
    worker_id: str = "w1",
    frame_index: int = 0,
    slots: Sequence[Optional[Tuple[str, float]]] = (("Left", 0.9), ("Right", 0.8)),
    label=5,
    base: float = 0.5,
) -> Dict[str, object]:
    """One frame-file row as a mapping; a slot is (handedness, score) or None."""
    row: Dict[str, object] = {"video_id": video_id, "worker_id": worker_id, "frame_index": frame_index}
    for s, slot in enumerate(slots):
        columns = coordinate_columns(s)
        if slot is None:
            row.update({f"s{s}_present": 0, f"s{s}_handedness": "", f"s{s}_hand_score": "",
                        f"s{s}_det_score": ""})
            row.update({c: "" for c in columns})
        else:
            handedness, score = slot
            row.update({f"s{s}_present": 1, f"s{s}_handedness": handedness, f"s{s}_hand_score": score,
                        f"s{s}_det_score": 0.95})
            row.update(zip(columns, slot_points(base + 0.125 * s).reshape(-1).tolist()))
    row["label"] = "" if label is None else label
    return row


def write_rows(rows, path) -> str:
    pd.DataFrame(rows, columns=FRAME_COLUMNS).to_csv(path, index=False, lineterminator="\n")
    return str(path)


def make_stream(
    n: int,
    video_id: str = "v1",
    worker_id: str = "w1",
    labels: Optional[np.ndarray] = None,
    seed: int = 0,
    dropout: float = 0.0,
) -> FrameStream:
    """A random labeled stream with gapless frame indices."""
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0.2, 0.8, size=(n, 2, 21, 3))
    present = rng.random((n, 2)) >= dropout
    handedness = np.where(present, np.array([0, 1]), -1).astype(np.int8)
    return FrameStream(
        video_id=video_id,
        worker_id=worker_id,
        frame_index=np.arange(n, dtype=np.int64),
        coords=np.where(present[..., None, None], coords, np.nan),
        present=present,
        handedness=handedness,
        handedness_score=np.where(present, 0.9, np.nan),
        detection_score=np.where(present, 0.9, np.nan),
        labels=np.asarray(labels if labels is not None else rng.integers(0, 10, n), dtype=np.int16),
    )


