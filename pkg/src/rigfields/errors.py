"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ParseError/ValidationError -> 2,
NumericError -> 3, OSError -> 1.
"""


class RigError(Exception):
    """Base class for all library errors."""


class ParseError(RigError):
    """Malformed input file (bad JSON, missing keys, wrong shapes)."""


class ValidationError(RigError):
    """An invariant of a domain type or an operation precondition is violated."""


class NumericError(RigError):
    """A numeric computation diverged (NaN/Inf where a finite value is required)."""
