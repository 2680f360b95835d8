"""Exception types; the CLI maps them onto exit codes."""


class DataValidationError(ValueError):
    """Input data violates a schema or domain constraint (exit code 3)."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite or undefined value (exit code 4)."""


class NonFiniteError(NumericalError):
    """Non-finite log-density; ``block`` names the offending parameter block."""

    def __init__(self, block: str, message: str | None = None):
        self.block = block
        super().__init__(message or f"non-finite log-density in block {block!r}")
