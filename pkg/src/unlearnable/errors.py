"""Exception types. Each carries the process exit code the CLI maps it to."""


class UnlearnableError(Exception):
    exit_code = 1


class ConfigError(UnlearnableError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    """Operand dimensions do not line up."""


class FormatError(UnlearnableError):
    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(UnlearnableError, ArithmeticError):
    exit_code = 4
