"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class ParseError(ValueError):
    """A point-cloud file is malformed.

    Carries the offending 1-based line number when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ValueError):
    """A run configuration is inconsistent or does not match a checkpoint."""


class DegenerateViewError(ValueError):
    """A simulated scan direction leaves no visible surface."""


class CheckFailure(AssertionError):
    """A named verification check failed."""

    def __init__(self, name, message):
        super().__init__(f"{name}: {message}")
        self.name = name
