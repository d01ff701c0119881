"""Exception hierarchy; each category maps to a CLI exit code."""


class StctrError(Exception):
    exit_code = 1


class ConfigError(StctrError):
    exit_code = 2


class DataError(StctrError):
    exit_code = 3


class NumericError(StctrError):
    exit_code = 4


class StorageError(StctrError):
    exit_code = 5


class DimensionError(StctrError, ValueError):
    exit_code = 4


class UsageError(StctrError):
    exit_code = 2


class UndefinedMetricError(StctrError):
    """Raised when a metric has no defined value, e.g. AUC on single-class input."""

    exit_code = 3
