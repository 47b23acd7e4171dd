"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MoeError(Exception):
    exit_code = 1


class UsageError(MoeError, ValueError):
    exit_code = 1


class ConfigError(MoeError, ValueError):
    exit_code = 1


class FormatError(MoeError, ValueError):
    exit_code = 2


class DataError(MoeError, ValueError):
    exit_code = 2


class NumericError(MoeError, ArithmeticError):
    exit_code = 3
