"""Two-stage Bayesian dose-combination trial engine.

Stage I escalates cohorts under overdose control; stage II adaptively
randomizes patients toward high posterior utility; the final recommendation is
a continuous dose combination maximizing the posterior-mean utility.
"""

from .models import (
    DEFAULT_TRADEOFF,
    DesignConstants,
    DoseDomainError,
    EfficacyParams,
    InvalidGridError,
    InvalidParamsError,
    StandardDoseGrid,
    ToxicityParams,
    UtilityTradeoff,
    efficacy_prob,
    standardize_grid,
    toxicity_prob,
    utility,
)

__all__ = [
    "DEFAULT_TRADEOFF",
    "DesignConstants",
    "DoseDomainError",
    "EfficacyParams",
    "InvalidGridError",
    "InvalidParamsError",
    "StandardDoseGrid",
    "ToxicityParams",
    "UtilityTradeoff",
    "efficacy_prob",
    "standardize_grid",
    "toxicity_prob",
    "utility",
]

__version__ = "0.1.0"
