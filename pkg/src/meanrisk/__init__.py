"""Mean-to-risk ratio portfolio construction.

Maximizes E / f(V) (Sharpe, Fano and general f) on dense or factor risk
models, builds long-only portfolios by iterative relaxation and
long-short multiply-optimized portfolios, and backtests them intraday
with a linear cost model.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DegenerateSolutionError,
    InfeasibleError,
    LookaheadError,
    MeanRiskError,
    ModelError,
    NumericalError,
    ValidationError,
)
from .ratio_optimizer import (  # noqa: E402
    RatioSpec,
    evaluate_portfolio,
    maximize,
    maximize_fano,
    maximize_general,
    maximize_sharpe,
    scalar_invariants,
)

__all__ = [
    "__version__",
    "MeanRiskError",
    "ValidationError",
    "ModelError",
    "NumericalError",
    "DegenerateSolutionError",
    "InfeasibleError",
    "LookaheadError",
    "RatioSpec",
    "evaluate_portfolio",
    "maximize",
    "maximize_fano",
    "maximize_general",
    "maximize_sharpe",
    "scalar_invariants",
]
