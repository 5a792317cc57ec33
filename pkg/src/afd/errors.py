"""Exception types shared across the package."""


class AFDError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AFDError, ValueError):
    pass


class InputError(AFDError, ValueError):
    pass


class ConfigError(AFDError, ValueError):
    pass


class UsageError(AFDError, RuntimeError):
    pass


class FormatError(AFDError, ValueError):
    """Malformed on-disk data (CIFAR records, checkpoints, feature dumps)."""


class DataError(AFDError, ValueError):
    pass
