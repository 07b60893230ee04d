"""Exception hierarchy; each class maps to a CLI error category."""


class BfrbeError(Exception):
    category = "internal"


class ConfigurationError(BfrbeError, ValueError):
    category = "config"


class DataError(BfrbeError, ValueError):
    category = "data"


class NumericalError(BfrbeError, ArithmeticError):
    category = "numerical"


class InternalError(BfrbeError, RuntimeError):
    category = "internal"
