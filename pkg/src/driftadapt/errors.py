"""Exception types shared across the package.

The CLI maps ConfigError to exit code 2 and every other DriftAdaptError
to exit code 1.
"""


class DriftAdaptError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DriftAdaptError):
    """Incompatible tensor shapes in a configuration, e.g. conv channel mismatch."""


class NumericError(DriftAdaptError):
    """Invalid numeric state, e.g. nonpositive standard deviations or NaN loss."""


class FormatError(DriftAdaptError):
    """A checkpoint or frame file failed validation."""


class ConfigError(DriftAdaptError):
    """Invalid run configuration (unknown key, bad value, missing path)."""
