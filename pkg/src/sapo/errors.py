"""Exception hierarchy shared by every module."""


class SapoError(Exception):
    """Base class for all package errors."""


class ContractError(SapoError, ValueError):
    """A precondition on an operation's inputs was violated."""


class SequenceTooLongError(ContractError):
    pass


class InvalidTokenError(ContractError):
    pass


class ConfigError(SapoError, ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class NumericError(SapoError, ArithmeticError):
    """Non-finite loss or gradient encountered during optimization."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
