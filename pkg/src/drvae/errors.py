"""Exception hierarchy shared across the package."""


class DrvaeError(Exception):
    """Base class for all package errors."""


class DimensionError(DrvaeError, ValueError):
    """Array or layer shapes do not line up."""


class DomainError(DrvaeError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(DrvaeError, ValueError):
    """A caller violated a documented precondition."""


class ConfigError(DrvaeError, ValueError):
    """Invalid configuration or generator spec."""


class IngestionError(DrvaeError, ValueError):
    """A data, dataset or checkpoint file could not be read."""


class NumericError(DrvaeError, ArithmeticError):
    """Training produced a non-finite quantity."""
