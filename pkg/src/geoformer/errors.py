"""Exception hierarchy shared by the pipeline modules.

The CLI maps these to exit codes: usage/config problems -> 2,
data problems -> 3, numerical failures -> 4.
"""


class GeoFormerError(Exception):
    exit_code = 1


class ConfigError(GeoFormerError, ValueError):
    exit_code = 2


class DataError(GeoFormerError, ValueError):
    exit_code = 3


class NumericError(GeoFormerError, ArithmeticError):
    exit_code = 4
