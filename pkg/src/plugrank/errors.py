"""Exception types shared across the package."""


class PlugRankError(Exception):
    """Base class for all package errors."""


class ConfigError(PlugRankError, ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(PlugRankError, ValueError):
    """Tensor shape does not match what an operation expects."""


class IndexOutOfRangeError(PlugRankError, IndexError):
    """Lookup index outside a table's row range."""


class OptimizerError(PlugRankError, RuntimeError):
    """Optimizer contract violation (e.g. trainable parameter without gradient)."""


class GradCheckError(PlugRankError, RuntimeError):
    """Gradient check could not be evaluated (non-finite function values)."""


class TrainingDivergedError(PlugRankError, RuntimeError):
    """Training loss became non-finite; carries the last finite state."""

    def __init__(self, message, step=None, last_finite_loss=None):
        super().__init__(message)
        self.step = step
        self.last_finite_loss = last_finite_loss


class CacheMissError(PlugRankError, KeyError):
    """Strict-mode feature lookup for an id that is not in the cache."""


class CacheFormatError(PlugRankError, ValueError):
    """Feature cache file is malformed or corrupted."""


class CheckpointError(PlugRankError, ValueError):
    """Checkpoint file malformed, or names/shapes do not match the model."""


class VersionMismatchError(PlugRankError, ValueError):
    """Artifact was produced by a different encoder version."""


class PipelineStageError(PlugRankError, RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
