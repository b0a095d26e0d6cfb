"""Exception types shared across the package.

The CLI maps these onto process exit codes: ValidationError -> 1,
NumericalError -> 2.
"""


class ValidationError(ValueError):
    """Bad user input: shapes, ranges, malformed files, config violations."""


class NumericalError(ArithmeticError):
    """Non-finite values or numerical breakdown during computation."""
