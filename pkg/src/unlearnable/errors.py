"""Exception types shared across the package."""


class UnlearnableError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(UnlearnableError, ValueError):
    pass


class RankError(UnlearnableError, ValueError):
    pass


class LabelError(UnlearnableError, ValueError):
    pass


class SpecError(UnlearnableError, ValueError):
    pass


class ParameterError(UnlearnableError, ValueError):
    pass


class FormatError(UnlearnableError, ValueError):
    pass


class ConsistencyError(UnlearnableError, ValueError):
    pass


class CompatibilityError(UnlearnableError, ValueError):
    pass


class FormError(UnlearnableError, ValueError):
    """Noise set has the wrong form (sample-wise vs class-wise) for the operation."""


class MapError(UnlearnableError, ValueError):
    pass


class NumericError(UnlearnableError, ArithmeticError):
    """Non-finite values appeared; ``report`` carries partial results when available."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
