"""Exception types raised across the package."""


class DgtseError(Exception):
    """Base class for all package errors."""


class EmptySignal(DgtseError, ValueError):
    pass


class ConfigError(DgtseError, ValueError):
    pass


class DegenerateSignal(DgtseError, ValueError):
    pass


class ShapeError(DgtseError, ValueError):
    pass


class DataError(DgtseError, ValueError):
    pass


class NotFitted(DgtseError, RuntimeError):
    pass
