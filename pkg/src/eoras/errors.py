"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class EorasError(Exception):
    """Base class for all package errors."""


class ConfigError(EorasError):
    """Invalid configuration: bad shapes, incompatible flags, malformed config files."""


class ShapeError(ConfigError):
    """Tensor shape mismatch; message names both offending shapes."""


class UsageError(ConfigError):
    """API misuse, e.g. stepping the optimizer with missing gradients."""


class DataError(EorasError):
    """Dataset is missing, malformed, or fails schema validation."""


class NumericError(EorasError):
    """Non-finite values where finite ones are required."""
