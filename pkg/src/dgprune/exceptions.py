"""Exception types raised across the package."""


class DGPruneError(Exception):
    """Base class for all package errors."""


class ShapeError(DGPruneError, ValueError):
    pass


class LabelError(DGPruneError, ValueError):
    pass


class GradientError(DGPruneError, RuntimeError):
    pass


class ConfigError(DGPruneError, ValueError):
    pass


class PruneError(DGPruneError, RuntimeError):
    pass


class DivergenceError(DGPruneError, FloatingPointError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class FormatError(DGPruneError, ValueError):
    """Container file has the wrong magic or a malformed header."""


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class SchemaError(DGPruneError, ValueError):
    pass
