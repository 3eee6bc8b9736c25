"""
Pipeline configuration constants shared across the application.
Contains skeleton layout constants, frame-rate rules, dimension-reduction modes,
per-family architecture bounds, and the model container format constants.
"""

from typing import Dict, List, Tuple

# Motion classes
N_CLASSES: int = 10
ERROR_CLASS: int = 0            # label for unintended / incorrect movements
UNLABELED: int = -1             # label marker inside numeric arrays

# Hand skeleton layout
N_LANDMARKS: int = 21
N_SLOTS: int = 2
N_DIMS: int = 3
HANDEDNESS_LABELS: Tuple[str, str] = ("Left", "Right")
NO_HAND: int = -1               # handedness code of an absent slot

# Landmark indices kept by the five-point reduction:
# wrist, thumb tip, index tip, middle tip, pinky tip
FIVE_POINT_INDICES: List[int] = [0, 4, 8, 12, 20]

REDUCTION_POINTS: Dict[str, int] = {
    "full": 21,
    "center_of_gravity": 1,
    "five_points": 5,
}

NORMALIZATION_MODES: List[str] = [
    "image_absolute",   # keep image-relative coordinates
    "on_most_recent",   # normalize the window on its most recent skeleton
    "per_skeleton",     # every skeleton normalized on itself
]

# Frame rates
SOURCE_FPS: int = 30
ALLOWED_FPS: List[int] = [1, 2, 3, 5, 6, 10, 15, 30]

# Architecture families and their bounds
FAMILIES: List[str] = ["lstm", "td_dense", "conv1d"]

FAMILY_BOUNDS: Dict[str, Dict[str, int]] = {
    "lstm": {"min_layers": 1, "max_layers": 20, "max_units": 250},
    "td_dense": {"min_layers": 0, "max_layers": 20, "max_units": 500},
    "conv1d": {"min_layers": 1, "max_layers": 10, "max_units": 128},
}

MAX_CONV_STRIDE: int = 5
MAX_POOL_SECTIONS: int = 120

# Model container
CONTAINER_MAGIC: bytes = b"MPAR1"
CONTAINER_VERSION: int = 1

# Parameter counts of models that performed well in past searches
PARAM_COUNT_RANGE: Tuple[int, int] = (19_000, 10_000_000)


def get_points_per_hand(mode: str) -> int:
    """
    Get the number of landmarks kept per hand for a reduction mode.

    Args:
        mode: One of "full", "center_of_gravity", "five_points"

    Returns:
        int: Points per hand (21, 1 or 5)
    """
    if mode not in REDUCTION_POINTS:
        raise ValueError(f"Unsupported reduction mode: {mode}. Must be one of {list(REDUCTION_POINTS)}")
    return REDUCTION_POINTS[mode]


def get_feature_length(mode: str) -> int:
    """
    Get the flattened feature length of one frame for a reduction mode.

    Args:
        mode: One of "full", "center_of_gravity", "five_points"

    Returns:
        int: 2 slots x points per hand x 3 coordinates
    """
    return N_SLOTS * get_points_per_hand(mode) * N_DIMS


def get_decimation(source_fps: int, target_fps: int) -> int:
    """
    Get the decimation step that turns a source rate into a target rate.

    Returns 0 when the target rate is not an exact divisor of the source rate.
    """
    if target_fps <= 0 or source_fps <= 0 or source_fps % target_fps != 0:
        return 0
    return source_fps // target_fps


def get_handedness_code(label: str) -> int:
    """Map "Left"/"Right" to the slot index that canonically holds that hand."""
    if label not in HANDEDNESS_LABELS:
        raise ValueError(f"Unsupported handedness: {label}. Must be one of {list(HANDEDNESS_LABELS)}")
    return HANDEDNESS_LABELS.index(label)
