"""
Exception hierarchy for the DGMIL pipeline.
"""

from typing import List, Optional


class DGMILError(Exception):
    """Base class for every error raised by the pipeline."""

    # 1 = validation error, 2 = runtime error
    exit_code = 2


class ConfigError(DGMILError, ValueError):
    """A flag, config-file entry or typed config value is invalid."""

    exit_code = 1


class DatasetValidationError(DGMILError, ValueError):
    """A dataset violates one or more core invariants."""

    exit_code = 1

    def __init__(self, message: str, violations: Optional[List] = None):
        super().__init__(message)
        self.violations = list(violations or [])


class FeatureFormatError(DGMILError):
    """A feature file has the wrong magic, version or layout."""

    exit_code = 1


class FeatureCorruptionError(FeatureFormatError):
    """A feature file payload is truncated or has trailing bytes."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DimensionMismatchError(DGMILError, ValueError):
    """Feature dimensions of two inputs disagree."""


class ClusteringError(DGMILError, ValueError):
    """K-means cannot produce the requested number of clusters."""


class TrainingDivergenceError(DGMILError, ArithmeticError):
    """Head training produced a non-finite loss."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"head training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class RefinementError(DGMILError):
    """A refinement round failed; the cause is chained."""

    def __init__(self, round_index: int, message: str):
        super().__init__(f"refinement round {round_index}: {message}")
        self.round_index = round_index


class MetricsError(DGMILError, ValueError):
    """Metric inputs are degenerate (e.g. a single class)."""


class ScoreNormalizationError(DGMILError, ValueError):
    """Normalization anchors do not span a positive range."""


class BundleError(DGMILError):
    """A model bundle is unreadable or inconsistent with its inputs."""
