"""
Exception hierarchy shared by the library and the command-line front end.
"""
from typing import List, Optional


class MatchingError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code = 1


class InstanceParseError(MatchingError, ValueError):
    """An instance file could not be parsed into an expectation graph."""

    exit_code = 2

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field is not None:
            location.append(f"field '{field}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")


class InstanceValidationError(MatchingError, ValueError):
    """An instance parsed correctly but violates one or more invariants."""

    exit_code = 2

    def __init__(self, violations: List["object"]):
        self.violations = list(violations)
        listing = "; ".join(str(v) for v in self.violations)
        super().__init__(f"instance violates {len(self.violations)} invariant(s): {listing}")


class CapacityError(MatchingError):
    """A problem exceeds a configured size bound."""

    exit_code = 3


class DimensionError(MatchingError, ValueError):
    """Shapes of an instance, flow or sequence do not agree."""

    exit_code = 2


class SequenceExhaustedError(MatchingError):
    """More arrivals were requested than there are workers."""

    exit_code = 2


class InvalidArrivalError(MatchingError, ValueError):
    """An arrival names a job type that cannot occur."""

    exit_code = 2


class UndefinedRatioError(MatchingError):
    """The competitive ratio is undefined because E[OPT] is zero."""

    exit_code = 2


class CertificateError(MatchingError):
    """The transportation solver could not certify optimality."""

    exit_code = 1


def exit_code_for(exc: BaseException) -> int:
    """Maps an exception to the documented CLI exit code."""
    if isinstance(exc, MatchingError):
        return exc.exit_code
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError, ValueError)):
        return 2
    return 1
