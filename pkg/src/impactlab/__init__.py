"""Hedging and pricing under permanent price impact.

Impact curves and liquidity costs, a simulator for the controlled price,
position and wealth, discrete-rebalancing and order-splitting experiments,
a finite-difference pricer for the quasi-linear super-hedging equation and a
replication engine driven by its solution.
"""

__version__ = "0.1.0"

from impactlab.exceptions import (
    ConfigError,
    ConvergenceError,
    DomainEscapeError,
    ImpactLabError,
    ModelValidationError,
    SeparationError,
    StabilityError,
)
from impactlab.impact_curve import ImpactCurve, ImpactFunction, make_impact
from impactlab.market_model import Claim, DiffusionCoefficients, MarketModel, build_model, validate
from impactlab.path_engine import Jump, PathResult, TimeGrid, TradingSignal, simulate_continuous, simulate_with_jumps
from impactlab.discrete_rebalance import DiscreteRunConfig, convergence_study, simulate_discrete
from impactlab.jump_splitting import SplitConfig, simulate_split, splitting_convergence
from impactlab.pricing_pde import PdeGrid, PdeSolution, SolverOptions, solve, solve_transformed
from impactlab.hedging_engine import HedgeReport, HedgeRun, liquidation_cancellation_check, run_hedge

__all__ = [
    "__version__",
    "Claim",
    "ConfigError",
    "ConvergenceError",
    "DiffusionCoefficients",
    "DiscreteRunConfig",
    "DomainEscapeError",
    "HedgeReport",
    "HedgeRun",
    "ImpactCurve",
    "ImpactFunction",
    "ImpactLabError",
    "Jump",
    "MarketModel",
    "ModelValidationError",
    "PathResult",
    "PdeGrid",
    "PdeSolution",
    "SeparationError",
    "SolverOptions",
    "SplitConfig",
    "StabilityError",
    "TimeGrid",
    "TradingSignal",
    "build_model",
    "convergence_study",
    "liquidation_cancellation_check",
    "make_impact",
    "run_hedge",
    "simulate_continuous",
    "simulate_discrete",
    "simulate_split",
    "simulate_with_jumps",
    "solve",
    "solve_transformed",
    "splitting_convergence",
    "validate",
]
