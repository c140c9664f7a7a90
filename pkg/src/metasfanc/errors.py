"""Exception hierarchy shared across the package."""


class MetaSfancError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(MetaSfancError, ValueError):
    pass


class ConfigError(MetaSfancError):
    pass


class DataError(MetaSfancError):
    pass


class InsufficientDataError(DataError):
    pass


class WavFormatError(DataError):
    pass


class NumericError(MetaSfancError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    """Raised when a control filter blows up.

    ``index`` is the sample (or iteration) at which the guard tripped.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SelectionError(MetaSfancError, KeyError):
    pass
