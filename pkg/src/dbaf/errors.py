"""Exception types shared across the package."""


class DBAFError(Exception):
    pass


class ConfigurationError(DBAFError, ValueError):
    """Incompatible backbone / model configuration."""


class ShapeError(DBAFError, ValueError):
    pass


class NumericError(DBAFError, ArithmeticError):
    """Non-finite values or a degenerate (zero-norm) quantity."""


class ValidationError(DBAFError, ValueError):
    pass


class StateError(DBAFError, RuntimeError):
    """Operation requires a model state that is not present (e.g. untrained)."""
