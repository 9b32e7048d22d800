"""Exception hierarchy shared by every module."""


class MTDAError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(MTDAError, ValueError):
    """Invalid configuration value, unknown key, or unknown enum member."""


class FormatError(MTDAError, ValueError):
    """A file does not follow the expected binary or text layout."""


class ConsistencyError(MTDAError, ValueError):
    """Two inputs that must agree (e.g. image and label counts) do not."""


class LabelLeakageError(MTDAError, PermissionError):
    """Training code tried to read labels of an unlabeled target view."""


class NumericError(MTDAError, FloatingPointError):
    pass


class ScheduleError(MTDAError, ValueError):
    pass


class DivergenceError(MTDAError, RuntimeError):
    """Raised when a loss turns non-finite or explodes during training."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}


class CheckpointError(MTDAError, IOError):
    """Checkpoint is truncated, corrupt, or written by an incompatible version."""
