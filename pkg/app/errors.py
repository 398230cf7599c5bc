"""Error taxonomy shared across the toolkit.

Each category maps to a process exit code used by the command-line interface.
"""


class StableTrainError(Exception):
    """Base class for all toolkit failures."""

    category = "error"
    exit_code = 1


class ConfigError(StableTrainError):
    """Invalid experiment configuration or command-line arguments."""

    category = "config"
    exit_code = 2


class DataError(StableTrainError):
    """Unreadable, malformed or inconsistent dataset or experiment files."""

    category = "data"
    exit_code = 3


class CheckpointError(DataError):
    """Corrupt or incompatible checkpoint file."""


class NumericError(StableTrainError):
    """Non-finite losses or gradients during training."""

    category = "numeric"
    exit_code = 4


class PartialGridFailure(StableTrainError):
    """Some, but not all, grid runs failed."""

    category = "grid"
    exit_code = 5


class DistortionError(ValueError):
    """Distortion parameter outside its valid range."""


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's shape rule."""
