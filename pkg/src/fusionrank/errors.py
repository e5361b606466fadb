"""Exception types shared across the package.

The CLI maps each class to a distinct exit code, so raise the most
specific one that applies.
"""


class FusionRankError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(FusionRankError):
    """Operands have incompatible shapes; message carries the shapes."""


class DataFormatError(FusionRankError):
    """A file or payload is malformed (bad magic, truncation, bad field)."""


class ConfigError(FusionRankError):
    """A configuration value violates its documented constraints."""


class TrainingDivergedError(FusionRankError):
    """Loss or gradients became non-finite during training."""
