"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class NumericError(ArithmeticError):
    """Raised on non-finite inputs or evaluations."""


class ContractError(RuntimeError):
    """Raised when a caller violates an API precondition."""


class ConfigurationError(ValueError):
    """Raised for invalid or mutually inconsistent settings."""


class InputError(ValueError):
    """Raised when data handed to a model or metric is malformed."""


class IncompatibleError(ValueError):
    """Raised when a saved artifact does not match the current build or model."""
