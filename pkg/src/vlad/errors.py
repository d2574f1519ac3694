"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class VladError(Exception):
    exit_code = 1


class ConfigError(VladError, ValueError):
    exit_code = 2


class InputError(VladError, ValueError):
    """Malformed numeric input (non-finite actions, too-short sequences, ...)."""

    exit_code = 2


class DataError(VladError):
    exit_code = 3


class CollectionError(DataError):
    pass


class TrainingError(VladError):
    exit_code = 4


class TrainingDivergence(TrainingError):
    pass
