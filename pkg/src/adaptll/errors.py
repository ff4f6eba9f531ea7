"""Exception hierarchy. Each class carries the CLI exit status it maps to."""


class AdaptLLError(Exception):
    exit_code = 1


class ShapeError(AdaptLLError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""

    exit_code = 2


class InputError(AdaptLLError, ValueError):
    """Malformed input data (bad file format, out-of-range labels)."""

    exit_code = 2


class UsageError(AdaptLLError, ValueError):
    """An argument is outside its documented domain."""

    exit_code = 2


class PlanningError(AdaptLLError):
    """No feasible plan exists under the memory budget."""

    exit_code = 3


class NumericError(AdaptLLError, FloatingPointError):
    """A loss or gradient became non-finite."""

    exit_code = 4


class CacheCorruptionError(AdaptLLError):
    """An activation cache chunk failed its checksum or header check."""

    exit_code = 5


class BudgetExceededError(AdaptLLError):
    """Measured peak memory exceeded the budget a plan promised to respect."""

    exit_code = 3


class FormatError(InputError):
    """A data file does not follow its binary layout."""
