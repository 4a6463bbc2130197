"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and usage problems exit 1,
data/format problems exit 2.
"""


class AvitError(Exception):
    """Base class for all package errors."""


class UsageError(AvitError):
    """An API was called with arguments that violate its contract."""


class ConfigError(AvitError):
    """A model, stage or generator configuration is invalid."""


class DimensionError(UsageError):
    """Tensor shapes are incompatible for the requested operation."""


class FormatError(AvitError):
    """A checkpoint, dataset or score file is malformed or does not match."""
