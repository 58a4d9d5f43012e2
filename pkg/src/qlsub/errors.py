"""Exception types shared across the package."""


class QlsubError(Exception):
    """Base class for all package errors."""


class ConfigError(QlsubError):
    """Invalid configuration or plan parameters."""


class DataError(QlsubError):
    """Malformed or unreadable input data."""


class EmptySample(QlsubError):
    """A fit was requested on an empty subsample."""


class SingularHessian(QlsubError):
    """The Newton matrix is numerically singular.

    Carries the condition-number estimate that triggered the failure.
    """

    def __init__(self, condition: float, message: str | None = None):
        self.condition = float(condition)
        super().__init__(message or f"singular Newton matrix (cond ~ {condition:.3e})")


class DegenerateScores(QlsubError):
    """Too few positive sampling scores to allocate the requested size."""


class PilotFailed(QlsubError):
    """The pilot stage produced an unusable estimate; raise r0 and retry."""


class PartitionFailed(QlsubError):
    """A partition-level fit failed; carries the partition id."""

    def __init__(self, partition_id: int, message: str | None = None):
        self.partition_id = int(partition_id)
        super().__init__(message or f"partition {partition_id} failed")
