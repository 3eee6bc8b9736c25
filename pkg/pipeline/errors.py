"""
Exception hierarchy of the pipeline.

Every error is a ValueError so callers that treat ValueError as "bad input"
(the CLI exit code 2, the HTTP 400 handler) need no special cases.
"""

from typing import Optional


class PipelineError(ValueError):
    """Base class of all pipeline errors."""


class ConfigError(PipelineError):
    """Invalid or unknown configuration value."""


# skeleton_model
class SkeletonError(PipelineError):
    pass


class MixedMissingness(SkeletonError):
    """Some but not all coordinates of a hand slot are missing."""


class LabelOutOfRange(SkeletonError):
    pass


class ScoreOutOfRange(SkeletonError):
    pass


class NonFiniteCoordinate(SkeletonError):
    pass


class InvalidHandedness(SkeletonError):
    pass


# ingest_builder
class IngestError(PipelineError):
    pass


class MalformedRow(IngestError):
    """A row of a frame or label file violates the file format."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonMonotonicFrameIndex(IngestError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnlabeledPrefix(IngestError):
    pass


class EmptyTable(IngestError):
    pass


class NonDivisorRate(IngestError):
    pass


class EmptyVideo(IngestError):
    pass


class StreamTooShort(IngestError):
    pass


class HistoryBudgetExceeded(IngestError):
    pass


# nn_core
class ModelError(PipelineError):
    pass


class InvalidSpec(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class EmptyTrainSet(ModelError):
    pass


class VersionMismatch(ModelError):
    pass


class CorruptContainer(ModelError):
    pass


# hypersearch
class SearchError(PipelineError):
    pass


class UnsatisfiableConstraints(SearchError):
    pass


class NoSuccessfulTrials(SearchError):
    pass


class TrialFailed(SearchError):
    pass


# eval_kpi
class EvaluationError(PipelineError):
    pass


class LengthMismatch(EvaluationError):
    pass


class EvenWindow(EvaluationError):
    pass
