"""Exception hierarchy shared by every flatloc module."""

from __future__ import annotations


class FlatlocError(Exception):
    """Base class for all library errors."""


class DatasetSchemaError(FlatlocError, ValueError):
    """The dataset file does not follow the expected JSON layout.

    ``key`` names the offending key path, e.g. ``queries[3].objects[0].class``.
    """

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class IntegrityError(FlatlocError, ValueError):
    """Cross references inside a dataset do not resolve."""


class PreconditionError(FlatlocError, ValueError):
    """An operation was called without the inputs it requires."""


class DegenerateConfigurationError(FlatlocError, ValueError):
    """A point configuration admits no unique alignment."""


class InvalidDepthError(FlatlocError, ValueError):
    pass


class TooFewObjectsError(FlatlocError, ValueError):
    pass


class UnmatchableError(FlatlocError):
    """No class-consistent assignment between a query and a map exists."""


class BudgetExceededError(FlatlocError):
    """The correspondence search ran out of its alignment budget.

    ``partial`` holds the best hypotheses found before the budget ran out,
    ranked like a complete result would be.
    """

    def __init__(self, message: str, partial=None, evaluated: int = 0):
        super().__init__(message)
        self.partial = list(partial or [])
        self.evaluated = evaluated


class RefinementDidNotConvergeError(FlatlocError):
    pass


class IncomparableReportsError(FlatlocError, ValueError):
    pass
