"""Exception types shared across the package.

The CLI maps each family to a stable exit code: configuration problems exit
with 1, data problems with 2, everything else with 3.
"""


class HazeGANError(Exception):
    """Base class for all package errors."""


class ConfigError(HazeGANError, ValueError):
    """Invalid configuration, arguments or missing required resources."""


class DataError(HazeGANError):
    """Dataset layout or image content is unusable."""


class CheckpointError(HazeGANError):
    """A checkpoint is truncated, corrupt, or has an unsupported version."""


class NonFiniteLossError(HazeGANError, FloatingPointError):
    """A training loss became NaN or infinite."""

    def __init__(self, message, terms=None):
        super().__init__(message)
        self.terms = dict(terms or {})
