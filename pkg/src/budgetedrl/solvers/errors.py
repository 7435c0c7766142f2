from typing import Optional, Sequence


class BudgetedRLError(Exception):
    """Base class of every error raised by budgetedrl."""


class DomainError(BudgetedRLError, ValueError):
    """An input lies outside the domain of an operation (bad index, malformed table, empty candidate set...)."""


class ConfigError(DomainError):
    """A configuration file or mapping is malformed or carries unknown keys."""


class ConvergenceError(BudgetedRLError, RuntimeError):
    """
    An iterative solver stopped before reaching its tolerance.

    Attributes:
        residual (float): Sup-norm residual of the last iteration.
        iterations (int): Number of iterations performed.
    """

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class RegressorDivergenceError(BudgetedRLError, RuntimeError):
    """
    The regression loss blew up during a fit.

    Attributes:
        trace (list[float]): Per-epoch loss up to and including the diverging epoch.
        iteration (int | None): Outer fitted-Q iteration during which the fit diverged, set by the caller.
    """

    def __init__(self, message: str, trace: Sequence[float], iteration: Optional[int] = None):
        super().__init__(message)
        self.trace = list(trace)
        self.iteration = iteration

    def __str__(self):
        base = super().__str__()
        return base if self.iteration is None else f"{base} (outer iteration {self.iteration})"


class EnvironmentFault(BudgetedRLError, RuntimeError):
    """An environment raised while being stepped or reset."""
