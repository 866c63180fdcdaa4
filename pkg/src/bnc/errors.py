"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``UsageError`` -> 1, ``DataFormatError``
(and I/O failures) -> 2, every other ``BncError`` -> 3.
"""


class BncError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(BncError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(BncError):
    """An argument value lies outside the operation's domain."""


class StateError(BncError):
    """An operation was called in the wrong mode or before its prerequisites."""


class DegenerateBatchError(BncError):
    """Train-mode batch statistics were requested for a single-row batch."""


class DataFormatError(BncError):
    """A file on disk is malformed, truncated, or internally inconsistent."""


class BncfError(DataFormatError):
    """A BNCF feature file failed validation."""


class CheckpointError(DataFormatError):
    """A BNCM model checkpoint failed validation."""


class ManifestError(DataFormatError):
    """A benchmark shift manifest could not be parsed."""


class UsageError(BncError):
    """The operation was invoked with unusable arguments."""


class ConvergenceError(BncError):
    """An iterative routine failed to reach its tolerance."""
