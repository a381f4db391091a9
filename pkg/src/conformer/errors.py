"""Shared exception types for the conformer package."""


class ConformerError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ConformerError, ValueError):
    """Shapes of the operands are incompatible for the requested op."""


class ContractError(ConformerError, ValueError):
    """An argument violates a documented precondition."""


class ValidationError(ConformerError, ValueError):
    """Input data (graph, ids, dataset rows) failed validation."""


class ConfigError(ConformerError, ValueError):
    """A configuration value is missing, unknown, or out of range."""


class LoadError(ConformerError, ValueError):
    """An on-disk artifact could not be parsed."""


class NumericsError(ConformerError, ArithmeticError):
    """A primitive produced a non-finite value."""
