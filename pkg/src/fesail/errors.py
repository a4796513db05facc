"""Exception types shared across the package.

The CLI maps these onto its exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3. Everything else is a programming error and propagates.
"""


class ConfigError(ValueError):
    """Invalid configuration or user input."""


class DataError(ValueError):
    """Malformed or inconsistent data (bad rows, missing spans, empty files)."""


class NumericError(RuntimeError):
    """Non-finite loss or other numeric breakdown during training."""


class StateError(RuntimeError):
    """Internal state contract violated (e.g. missing embedding anchors)."""


class SizeError(ValueError):
    """Instance too large for an exhaustive operation."""
