"""Exception types shared across the library.

The CLI maps these onto exit codes: config/usage problems -> 1, data
problems -> 2, numerical failures -> 3.
"""


class DimensionError(ValueError):
    """Array shapes inconsistent with the model or batch layout."""


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


class TrainingError(RuntimeError):
    """Numerical failure during optimization (non-finite loss or gradient)."""
