"""Exception types shared across the package."""


class DegenerateInputError(ValueError):
    """Input is well-typed but mathematically degenerate (zero norm, zero matrix)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(ValueError):
    """A configuration value violates the owning module's invariants."""


class DatasetError(Exception):
    """A dataset is empty or contains no valid records."""
