"""Exception hierarchy.

UserError subclasses map to CLI exit code 1, NumericalError and StateError to 2.
"""


class EmqError(Exception):
    pass


class UserError(EmqError):
    pass


class ConfigError(UserError, ValueError):
    pass


class DimensionError(UserError, ValueError):
    pass


class DomainError(UserError, ValueError):
    pass


class DataError(UserError, ValueError):
    pass


class ModelFormatError(UserError):
    pass


class VersionError(ModelFormatError):
    pass


class StateError(EmqError, RuntimeError):
    pass


class NumericalError(EmqError, ArithmeticError):
    pass


class InvariantError(EmqError, RuntimeError):
    """A quantile fan lost strict monotonicity."""
