"""Exception types raised across the package."""


class BLRainError(Exception):
    """Base class for all package errors."""


class ParameterError(BLRainError, ValueError):
    """Invalid model parameters."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class NonPositiveParameter(ParameterError):
    pass


class AlphaBelowMinimum(ParameterError):
    pass


class UnsupportedShape(ParameterError):
    pass


class AlphaTooSmall(ParameterError):
    """A gamma-kernel expectation would diverge (alpha too close to k)."""


class ZeroVariance(BLRainError, ValueError):
    pass


class HorizonNonPositive(BLRainError, ValueError):
    pass


class NonDividingBin(BLRainError, ValueError):
    pass


class DataError(BLRainError, ValueError):
    """Problem with an input gauge file."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ParseError(DataError):
    pass


class NonMonotoneTimestamps(DataError):
    pass


class NegativeDepth(DataError):
    pass


class InsufficientYears(BLRainError, ValueError):
    pass


class AllDryMonth(ZeroVariance):
    pass


class NoWetIntervals(BLRainError, ValueError):
    pass


class NoCompleteYears(BLRainError, ValueError):
    pass


class NoFeasibleStart(BLRainError, ValueError):
    pass


class NonConvergence(BLRainError, RuntimeError):
    pass


class ThresholdNotBracketed(BLRainError, ValueError):
    pass


class SingularCurvature(BLRainError, ValueError):
    pass
