"""Walk along an impact curve.

A buy order is fed into the book in infinitesimal pieces; each piece moves
the price by f(price) per share.  This script follows one order, prints the
price path and the liquidity cost, then undoes the order and shows that the
round trip leaves the state where it started.

    python3 demos/impact_curve_tour.py
"""

import numpy as np

from impactlab import ImpactCurve
from impactlab.impact_curve import sinusoidal_impact

curve = ImpactCurve(sinusoidal_impact(base=0.5, amp=0.25))
x0 = 0.0

print("order size   price after   liquidity cost")
for size in np.linspace(0.0, 2.0, 9):
    print(f"{size:10.2f} {float(curve.flow(x0, size)):13.6f} {float(curve.cost(x0, size)):16.6f}")

# the cost is what a buyer pays above the pre-trade mark, so it grows roughly like size^2 f / 2
size = 1.5
print(f"\ncost of {size} shares: {float(curve.cost(x0, size)):.6f}  (fixed-impact guess {0.5 * size**2 * 0.5:.6f})")

state = (x0, 0.0, 0.0)
there = curve.round_trip_state(*state, size)
back = curve.round_trip_state(*there, -size)
print("\nstate (price, shares, wealth)")
print("  start      ", state)
print("  after buy  ", tuple(round(float(s), 6) for s in there))
print("  after sell ", tuple(round(float(s), 12) + 0.0 for s in back))
