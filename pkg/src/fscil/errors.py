"""Shared exception types."""


class DimensionError(ValueError):
    """Shapes or dimensions that do not line up."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class ContractError(RuntimeError):
    """A precondition of an internal operation was violated by the caller."""


class ConfigError(ValueError):
    """Invalid experiment, model, or data-generation configuration."""


class ParseError(ValueError):
    """Malformed serialized data. Carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class StreamValidationError(ValueError):
    """A session stream failed validation. Carries the violation list."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations) or "stream validation failed")
