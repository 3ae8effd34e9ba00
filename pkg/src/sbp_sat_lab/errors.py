"""Exception hierarchy shared by every module of the package."""


class SbpSatError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SbpSatError, ValueError):
    """Raised when an argument violates a documented precondition."""


class SingularSystemError(SbpSatError):
    """Raised when a linear system is numerically singular.

    The offending pivot magnitude is kept on ``pivot`` so callers can report
    how close to singular the matrix was.
    """

    def __init__(self, message: str, pivot: float):
        super().__init__(message)
        self.pivot = pivot


class ConstructionError(SbpSatError):
    """Raised when an operator cannot be built for the requested parameters."""


class ParseError(SbpSatError):
    """Raised on malformed operator or coefficient files."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class VerificationError(SbpSatError):
    """Raised when a loaded operator fails mandatory checks."""

    def __init__(self, message: str, failed: list[str]):
        super().__init__(message)
        self.failed = failed


class FitError(SbpSatError):
    """Raised when a convergence rate cannot be fitted from the given rows."""
