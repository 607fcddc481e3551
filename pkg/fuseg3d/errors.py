"""Exception hierarchy.

Every error knows the process exit code the command line maps it to. I/O problems are
left to the built-in `OSError` family.
"""


class FusegError(Exception):
    exit_code = 1


class ConfigError(FusegError, ValueError):
    """Invalid configuration or hyperparameter combination."""

    exit_code = 2


class ParameterError(ConfigError):
    """A function argument lies outside its valid range."""


class DataError(FusegError):
    exit_code = 3


class MetadataError(DataError):
    """A file header or sidecar is missing or unusable."""


class AlignmentError(DataError):
    """PET and CT grids cannot be paired."""


class ModelError(DataError):
    """Inputs have shapes the network cannot consume."""


class FusionError(ModelError):
    pass


class MetricError(DataError, ValueError):
    pass


class StatisticsError(DataError, ValueError):
    pass


class NumericalError(FusegError, ArithmeticError):
    """Non-finite values appeared during optimization."""

    exit_code = 4
