"""Exception types shared across the package."""


class ScoreMocoError(Exception):
    """Base class for all package errors."""


class FormatError(ScoreMocoError):
    """A file on disk does not match its header or expected layout."""


class DivergenceError(ScoreMocoError):
    """A numerical integration or training run produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ResourceError(ScoreMocoError):
    """A request exceeds a configured computational cap."""


class IncompatibleWeightsError(ScoreMocoError):
    """Stored network weights do not match the requested architecture."""


class ConfigError(ScoreMocoError):
    """An experiment configuration failed validation."""
