"""Exception taxonomy shared across modules; the CLI maps these to exit codes."""


class ConfigError(ValueError):
    """Bad configuration or usage (exit code 1)."""


class DataError(ValueError):
    """Bad or missing input data (exit code 2)."""


class NumericsError(RuntimeError):
    """Numerical failure such as a NaN loss (exit code 3); may carry a
    diagnostic snapshot dict in ``snapshot``."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
