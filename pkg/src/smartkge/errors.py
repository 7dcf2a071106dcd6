"""Exception types. Each maps to a CLI exit code."""


class SmartError(Exception):
    exit_code = 1


class ConfigError(SmartError, ValueError):
    exit_code = 1


class DataError(SmartError, ValueError):
    exit_code = 2


class DivergenceError(SmartError, ArithmeticError):
    exit_code = 3
