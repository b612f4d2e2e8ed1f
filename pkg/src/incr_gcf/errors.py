"""Exception hierarchy.

The CLI maps these onto its exit codes, so every error raised by the
library belongs to one of three families: I/O, validation, or empty result.
"""


class IncrGCFError(Exception):
    """Base class for all library errors."""

    exit_code = 2


class ValidationError(IncrGCFError, ValueError):
    """Bad input, bad configuration, or a violated contract."""

    exit_code = 2


class EmptyResultError(IncrGCFError):
    """An operation produced (or was handed) nothing to work with."""

    exit_code = 3


class EmptyDatasetError(EmptyResultError):
    pass


class EmptyAfterFilterError(EmptyResultError):
    def __init__(self, min_count):
        super().__init__(
            f"filtering with min_count={min_count} removed every interaction"
        )
        self.min_count = min_count


class SplitTooSmallError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class BoundsError(ValidationError, IndexError):
    pass


class StaleForwardError(ValidationError):
    """backward() was handed embeddings computed before the model changed."""


class ProtocolError(ValidationError):
    """Incremental protocol broken, typically an indexing bug upstream."""


class SnapshotError(IncrGCFError):
    exit_code = 1


class SnapshotVersionError(SnapshotError):
    pass


class SnapshotFingerprintError(SnapshotError):
    pass


class SnapshotTruncatedError(SnapshotError):
    pass
