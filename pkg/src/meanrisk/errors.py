"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: validation problems exit with 1,
numerical failures with 2, I/O with 3.
"""


class MeanRiskError(Exception):
    """Base class for all library errors."""


class ValidationError(MeanRiskError, ValueError):
    """Invalid argument, range error or malformed input."""


class ModelError(MeanRiskError):
    """A risk model violates its invariants (non-PD factor covariance, etc.)."""


class NumericalError(MeanRiskError):
    """Singular system, failed root bracket or non-convergence."""

    def __init__(self, message: str, condition: float | None = None):
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)
        self.condition = condition


class DegenerateSolutionError(NumericalError):
    """The closed-form solution is undefined for these inputs (e.g. gamma == 0)."""


class InfeasibleError(NumericalError):
    """No admissible portfolio exists (empty active set, all-adverse returns)."""


class LookaheadError(MeanRiskError):
    """A backtest strategy tried to read data from its own date or later."""
