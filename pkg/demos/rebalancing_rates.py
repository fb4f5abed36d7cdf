"""How fast do discrete trading and split block orders approach the limit?

Two small Monte Carlo studies on the same market:

* rebalancing only on n dates: mean squared gap to continuous trading ~ 1/n
* a block order spread over a window of length eps: gap ~ eps

Sizes are small so this finishes in about a minute; the acceptance suite
runs the full-size versions.

    python3 demos/rebalancing_rates.py
"""

from impactlab import (
    DiscreteRunConfig,
    MarketModel,
    SplitConfig,
    TradingSignal,
    convergence_study,
    splitting_convergence,
)
from impactlab.impact_curve import constant_impact
from impactlab.market_model import constant_coefficients, cosine_claim

model = MarketModel(constant_coefficients(0.0, 0.2), constant_impact(0.3), cosine_claim(), (-8.0, 8.0), 1.0)

signal = TradingSignal(a=0.5, b=0.0)
table = convergence_study(model, signal, [8, 16, 32, 64], DiscreteRunConfig(64, mc_paths=2000, base_grid_steps=512, seed=1))
print("discrete rebalancing")
print(table)

signal = TradingSignal(a=0.5, b=0.0, jumps=((0.5, 1.0),))
eps = (1 / 16, 1 / 32, 1 / 64, 1 / 128)
table = splitting_convergence(model, signal, SplitConfig(eps, mc_paths=1000, seed=2))
print("\nsplit block order")
print(table)
