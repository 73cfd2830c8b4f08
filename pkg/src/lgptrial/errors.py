"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data or configuration violates a documented invariant."""


class ParseError(ValidationError):
    """A data file could not be parsed.

    Carries the 1-based line number of the offending row when known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(ArithmeticError):
    """A linear-algebra or sampling step failed numerically."""

    def __init__(self, message, minor=None, iteration=None):
        self.minor = minor
        self.iteration = iteration
        super().__init__(message)
