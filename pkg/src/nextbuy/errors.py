"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericError`` -> 3.
"""


class NextBuyError(Exception):
    """Base class for all package errors."""


class DataError(NextBuyError):
    """Input data or configuration is malformed or inconsistent."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateKeyError(DataError):
    pass


class NotFoundError(DataError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class ConfigError(DataError):
    pass


class FormatError(DataError):
    """Serialized container or feature file does not match the expected layout."""


class OrderingError(DataError):
    pass


class DomainError(NextBuyError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ShapeError(NextBuyError, ValueError):
    pass


class NumericError(NextBuyError, ArithmeticError):
    """A non-finite value appeared during a forward/backward pass or training."""

    def __init__(self, message: str, node: str | None = None):
        self.node = node
        super().__init__(message)


class PipelineError(NextBuyError):
    """A store or model needed by the scoring pipeline is unavailable."""
