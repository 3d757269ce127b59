"""Option market making with a quadratic inventory ansatz under Heston dynamics."""

from .hamiltonian import HamiltonianError, IntensityParams, optimal_quote
from .model import BookSpec, CorrelationStructure, HestonJumpParams, JumpSpec, OptionSpec
from .pricing import GreeksBundle, PricingError

__all__ = [
    "BookSpec",
    "CorrelationStructure",
    "GreeksBundle",
    "HamiltonianError",
    "HestonJumpParams",
    "IntensityParams",
    "JumpSpec",
    "OptionSpec",
    "PricingError",
    "optimal_quote",
]
