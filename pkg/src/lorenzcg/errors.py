"""Exception hierarchy.  Each family maps to a distinct CLI exit code."""

from __future__ import annotations


class LorenzCGError(Exception):
    exit_code = 1


class ConfigError(LorenzCGError):
    exit_code = 2


class PrecisionError(ConfigError):
    pass


class ContextMismatchError(LorenzCGError):
    """Arithmetic between values of two different precision contexts."""


class DecimalParseError(LorenzCGError, ValueError):
    def __init__(self, reason: str, text: str, position: int):
        super().__init__(f"{reason} at position {position} in {text!r}")
        self.reason = reason
        self.text = text
        self.position = position


class SolverError(LorenzCGError):
    exit_code = 3


class SingularMatrixError(SolverError):
    def __init__(self, pivot, index: int):
        super().__init__(f"matrix singular to working precision: pivot {index} has magnitude {float(pivot):.3e}")
        self.pivot = pivot
        self.index = index


class ConvergenceError(SolverError):
    def __init__(self, message: str, last=None, history=None):
        super().__init__(message)
        self.last = last
        self.history = history or []


class StepFailure(SolverError):
    def __init__(self, message: str, interval: int | None = None, time=None, history=None):
        super().__init__(message)
        self.interval = interval
        self.time = time
        self.history = history or []


class DomainError(LorenzCGError, ValueError):
    exit_code = 2


class CapabilityError(LorenzCGError):
    exit_code = 3


class CalibrationError(LorenzCGError):
    exit_code = 4


class FitError(CalibrationError):
    pass


class TrajectoryFormatError(LorenzCGError):
    exit_code = 5


class FormatVersionError(TrajectoryFormatError):
    pass


class TruncatedFileError(TrajectoryFormatError):
    pass


class PrecisionMismatchError(TrajectoryFormatError):
    pass
