"""Exception types shared across the package.

The CLI maps ``ValidationError`` to exit code 2 and ``NumericalError`` to
exit code 3.
"""


class ValidationError(ValueError):
    """Malformed input: bad shapes, invalid probabilities, unparsable files."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite or degenerate value."""
