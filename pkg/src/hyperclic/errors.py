"""Exception types raised across the package."""


class HyperclicError(Exception):
    """Base class for all package errors."""


class InvalidInputError(HyperclicError, ValueError):
    """Non-finite or otherwise malformed numeric input."""


class GradientUndefinedError(HyperclicError, ValueError):
    """Gradient requested at a point where the function is not differentiable."""


class ConeUndefinedError(HyperclicError, ValueError):
    """Entailment cone requested for an apex inside the inner radius."""


class HierarchyError(HyperclicError, ValueError):
    """Malformed or inconsistent hierarchy."""


class ConfigError(HyperclicError, ValueError):
    """Invalid configuration value."""


class MemoryBudgetError(HyperclicError, ValueError):
    """Exemplar budget too small for the number of seen instances."""


class TrainingError(HyperclicError, RuntimeError):
    """Optimization produced a non-finite value or was misused."""
