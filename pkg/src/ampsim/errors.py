"""Exception types raised across the package."""


class AmpSimError(Exception):
    """Base class for all package errors."""


class DataError(AmpSimError, ValueError):
    """Input data violates the documented schema or invariants."""


class MalformedRow(DataError):
    def __init__(self, line, reason):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class NonMonotoneSteps(DataError):
    pass


class SegmentCapExceeded(DataError):
    pass


class DuplicateSegment(DataError):
    pass


class UnknownUnit(AmpSimError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ZeroDenominator(AmpSimError, ZeroDivisionError):
    pass


class NegativeInput(AmpSimError, ValueError):
    pass


class NoLaggedData(AmpSimError, ValueError):
    pass


class ZeroTotalLoad(AmpSimError, ValueError):
    pass


class MissingReference(AmpSimError, ValueError):
    pass


class InvalidHours(AmpSimError, ValueError):
    pass


class ClearingError(AmpSimError):
    pass


class InsufficientSupply(ClearingError):
    pass


class EmptyStack(ClearingError):
    pass


class MismatchedRuns(AmpSimError, ValueError):
    pass


class InvalidSpec(AmpSimError, ValueError):
    pass


class EstimationError(AmpSimError):
    pass


class EmptyInput(EstimationError, ValueError):
    pass


class InvalidFraction(EstimationError, ValueError):
    pass


class EmptySample(EstimationError, ValueError):
    pass


class TooFewClusters(EstimationError, ValueError):
    pass


class RankDeficient(EstimationError, ValueError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")
