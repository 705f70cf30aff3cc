"""Exception hierarchy shared by all modules."""


class SmoothHMMError(Exception):
    """Base class for package errors."""


class ConfigError(SmoothHMMError, ValueError):
    """Invalid basis, model or fitting configuration."""


class DomainError(SmoothHMMError, ValueError):
    """Input or parameter outside the support of a function."""


class ModelError(SmoothHMMError, ValueError):
    """Structurally invalid model, e.g. a reducible Markov chain."""


class NumericalError(SmoothHMMError, ArithmeticError):
    """Numerical failure such as underflow of the forward vector or a singular Hessian."""

    def __init__(self, message, *, index=None, stage=None):
        super().__init__(message)
        self.index = index
        self.stage = stage


class OptimizerError(NumericalError):
    """Inner optimizer stuck on the barrier value."""
