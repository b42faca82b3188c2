"""Exception hierarchy shared across the package."""


class RankKitError(Exception):
    """Base class for all package errors."""


class DimensionError(RankKitError, ValueError):
    pass


class ParameterError(RankKitError, ValueError):
    pass


class SchemaError(RankKitError, ValueError):
    pass


class InputError(RankKitError, ValueError):
    pass


class UndefinedMetricError(RankKitError, ValueError):
    pass


class SnapshotError(RankKitError, ValueError):
    pass


class ConfigError(RankKitError, ValueError):
    pass


class NumericalError(RankKitError, ArithmeticError):
    pass


class DivergenceError(RankKitError, ArithmeticError):
    """Raised when a loss or gradient turns non-finite; carries the step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
