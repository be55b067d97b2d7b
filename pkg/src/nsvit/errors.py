"""Exception types raised across the package."""


class NsvitError(Exception):
    """Base class for all package errors."""


class ShapeError(NsvitError, ValueError):
    pass


class UsageError(NsvitError, ValueError):
    pass


class NumericError(NsvitError, ArithmeticError):
    pass


class ExistenceError(NsvitError):
    """A construction whose preconditions hold in exact arithmetic failed numerically."""


class TrainingError(NsvitError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ParseError(NsvitError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} at byte offset {offset}")
        self.offset = offset
