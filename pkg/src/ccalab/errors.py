"""Exception hierarchy shared across the package."""


class CCALabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CCALabError, ValueError):
    """Invalid space dimensions, budgets, or experiment configuration."""


class InputError(CCALabError, ValueError):
    """An argument is out of range or structurally invalid."""


class DomainError(CCALabError, ValueError):
    """A quantity is undefined on the given support (e.g. division by p(x)=0)."""


class NumericalError(CCALabError, ArithmeticError):
    """A loss, gradient, or parameter became non-finite."""
