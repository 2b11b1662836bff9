"""Exception hierarchy shared by every stage; each family maps to a CLI exit code."""
from __future__ import annotations

from typing import Iterable


class LtkdError(Exception):
    exit_code = 1


class ConfigurationError(LtkdError, ValueError):
    exit_code = 2


class CoverageError(ConfigurationError):
    def __init__(self, orphan_ids: Iterable[int], message: str | None = None) -> None:
        self.orphan_ids = sorted(int(i) for i in orphan_ids)
        super().__init__(message or f"Classes without an owning teacher: {self.orphan_ids}")


class DataError(LtkdError, ValueError):
    exit_code = 3


class EmptyInputError(DataError):
    pass


class DatasetParseError(DataError):
    def __init__(self, message: str, *, line_number: int) -> None:
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class DatasetVersionError(DataError):
    pass


class DatasetValidationError(DataError):
    def __init__(self, message: str, *, instance_index: int) -> None:
        self.instance_index = instance_index
        super().__init__(f"instance {instance_index}: {message}")


class EmptySubsetError(DataError):
    pass


class ComparisonError(DataError):
    pass


class ShapeError(LtkdError, ValueError):
    exit_code = 4


class NumericError(LtkdError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str, *, layer_index: int | None = None) -> None:
        self.layer_index = layer_index
        super().__init__(message)


class NumericDomainError(NumericError):
    pass


class IntegrityError(LtkdError):
    exit_code = 5


class PartialRunError(IntegrityError):
    def __init__(self, missing: str) -> None:
        self.missing = missing
        super().__init__(f"Run directory is incomplete: missing {missing}")


class StageError(LtkdError):
    def __init__(self, stage: str, cause: LtkdError) -> None:
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code
        super().__init__(f"stage '{stage}' failed: {cause}")


class UndefinedAPError(ValueError):
    """Average precision requested for a class with no positive labels."""
