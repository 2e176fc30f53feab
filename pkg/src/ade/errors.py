"""Exception hierarchy shared across the package."""


class AdeError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(AdeError):
    """Invalid or inconsistent configuration values."""


class DimensionError(AdeError):
    """Tensor shapes do not satisfy an operation's contract."""


class MaskError(AdeError):
    """A mask violates the at-least-one-valid-position contract."""


class DataError(AdeError):
    """Malformed input data (CSV rows, labels, empty texts)."""


class CorruptionError(AdeError):
    """A binary artifact failed a magic/version/hash/shape check."""


class TrainingError(AdeError):
    """Training produced a non-finite loss or otherwise diverged."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class GradientCheckError(AdeError):
    """A gradient check encountered a non-finite analytic gradient."""
