"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: data problems (bad files, sizes,
empty inputs) exit 2, numeric failures exit 3.
"""

from __future__ import annotations


class ClicError(Exception):
    """Base class for all package errors."""


class DataError(ClicError, ValueError):
    """Input data is unusable for the requested operation."""


class DimensionError(DataError):
    """Tensor shapes are incompatible.

    ``axes`` names the offending axes so callers can report them.
    """

    def __init__(self, message: str, axes: tuple = ()):
        super().__init__(message)
        self.axes = tuple(axes)


class ContractError(ClicError, ValueError):
    """A caller broke an operation's precondition."""


class NormalizationError(ClicError, ArithmeticError):
    """Attempted to normalize a zero-norm vector."""


class EmptyInputError(DataError):
    pass


class SizeError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class CapacityError(DataError):
    pass


class ParameterError(ClicError, ValueError):
    pass


class DegenerateSeriesError(DataError):
    """A correlation was requested on a series with zero variance."""


class NumericFailure(ClicError, ArithmeticError):
    """Training produced a non-finite loss.

    ``record`` carries the diagnostic state at the time of the abort.
    """

    def __init__(self, message: str, record: dict | None = None):
        super().__init__(message)
        self.record = record or {}
