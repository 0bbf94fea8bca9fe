"""Exception types shared across the package."""

from __future__ import annotations


class FedSkewError(Exception):
    """Base class for every error raised by fedskew."""


class ShapeError(FedSkewError, ValueError):
    pass


class ValidationError(FedSkewError, ValueError):
    pass


class NumericError(FedSkewError, ArithmeticError):
    """A loss or parameter became non-finite."""

    def __init__(self, message: str, *, batch_index: int | None = None,
                 client_id: int | None = None, step: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index
        self.client_id = client_id
        self.step = step


class FormatError(FedSkewError, ValueError):
    """Malformed binary input (bad magic, truncated payload, unknown code)."""

    def __init__(self, message: str, *, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class ConsistencyError(FedSkewError, ValueError):
    pass


class PartitionError(FedSkewError, ValueError):
    pass


class AggregationError(FedSkewError, ValueError):
    pass


class StageError(FedSkewError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
