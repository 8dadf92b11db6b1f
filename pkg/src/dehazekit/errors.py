"""Exception types shared across the package.

The CLI maps these onto exit codes: user-input problems (bad shapes, empty
datasets, inconsistent configs, wrong call order) exit with 2, numerical
failures (non-finite losses, degenerate vectors) exit with 3.
"""


class DehazeError(Exception):
    """Base class for all package errors."""


class InputError(DehazeError):
    """Invalid or empty user input (datasets, paths, sizes)."""


class DimensionError(InputError):
    """Tensor rank or shape does not match the operation's contract."""


class ConfigError(InputError):
    """Inconsistent configuration (stage counts, widths, key names)."""


class StateError(InputError):
    """Operation invoked before its prerequisites (e.g. untrained prompts)."""


class NumericError(DehazeError):
    """Non-finite values or degenerate numeric input encountered."""
