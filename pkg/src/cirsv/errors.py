"""Exception types raised by cirsv."""


class CIRSVError(Exception):
    """Base class for all library errors."""

    kind = "error"


class InvalidParametersError(CIRSVError, ValueError):
    kind = "invalid-parameters"


class QuadratureError(CIRSVError, ArithmeticError):
    kind = "quadrature-failure"


class HypothesisAViolation(CIRSVError, ValueError):
    """Drift fails the admissibility check; ``y`` is the offending point."""

    kind = "hypothesis-A-violation"

    def __init__(self, message, y=None):
        super().__init__(message)
        self.y = y


class DensityDomainError(CIRSVError, ValueError):
    """Evaluation requested outside the effective support of a density."""

    kind = "y-out-of-range"


class GridTooCoarseError(CIRSVError, ValueError):
    kind = "grid-too-coarse"


class NegativeVarianceError(CIRSVError, ArithmeticError):
    kind = "negative-variance"


class ODEStepError(CIRSVError, ArithmeticError):
    kind = "ode-step-failure"


class ResidualCheckError(CIRSVError, ArithmeticError):
    kind = "residual-check-failure"


class SimulationError(CIRSVError, ValueError):
    kind = "simulation-error"


class StepTooLargeError(SimulationError):
    kind = "step-too-large"


class MeasureMismatchError(SimulationError):
    kind = "measure-mismatch"


class InsufficientDataError(CIRSVError, ValueError):
    kind = "insufficient-data"


class SeriesFormatError(CIRSVError, ValueError):
    """Malformed rate file; ``line`` is 1-based when known."""

    kind = "parse-error"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NonMonotoneTimestampsError(SeriesFormatError):
    kind = "nonmonotone-timestamps"


class NegativeRateError(SeriesFormatError):
    kind = "negative-rates"
