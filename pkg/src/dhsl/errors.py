"""Exception hierarchy shared by every dhsl module."""


class DhslError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DhslError, ValueError):
    """An array argument has dimensions incompatible with the operation."""


class StateError(DhslError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class DataError(DhslError, ValueError):
    """A dataset, manifest, or sampling request cannot be satisfied."""


class ProtocolError(DhslError, ValueError):
    """An evaluation protocol precondition is violated."""


class ConfigError(DhslError, ValueError):
    """A configuration value or combination is invalid."""


class CheckpointFormatError(DhslError, ValueError):
    """A checkpoint file is corrupt or written by an incompatible version."""


class TrainingDivergenceError(DhslError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where
