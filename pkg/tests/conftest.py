import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest

from impactlab.impact_curve import ImpactCurve, constant_impact, sinusoidal_impact
from impactlab.market_model import MarketModel, constant_coefficients, cosine_claim


def rk4_flow_and_cost(x0: float, delta: float, f, step: float = 1e-6) -> tuple[float, float]:
    """Scalar fixed-step RK4 for x' = f(x) with a Simpson sum for int s f(x(s)) ds."""
    n = max(2, 2 * math.ceil(abs(delta) / (2 * step)))
    h = delta / n
    x = x0
    acc = 0.0
    for k in range(n + 1):
        fx = f(x)
        w = 1.0 if k in (0, n) else (4.0 if k % 2 else 2.0)
        acc += w * (k * h) * fx
        if k == n:
            break
        k1 = fx
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x, acc * h / 3.0


def sin_f(x: float) -> float:
    return 0.5 + 0.25 * math.sin(x)


@pytest.fixture
def sinus_curve():
    return ImpactCurve(sinusoidal_impact(0.5, 0.25))


@pytest.fixture
def const_curve():
    return ImpactCurve(constant_impact(0.5))


@pytest.fixture
def heat_model():
    return MarketModel(constant_coefficients(0.0, 0.2), constant_impact(0.5), cosine_claim(), (-8.0, 8.0), 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"

# shrunk params for each shipped config: same code paths, seconds not minutes
_SMALL = {
    "curve_check_sinusoidal": {"samples": 50},
    "discrete_convergence": {"n_list": [4, 8], "mc_paths": 60, "base_grid_steps": 64, "batch_size": 25},
    "split_convergence": {"epsilon_list": [0.1, 0.05], "mc_paths": 40, "batch_size": 20},
    "price_cosine": {"pde": {"space_steps": 32, "time_steps": 16}},
    "price_sinusoidal_transformed": {"pde": {"space_steps": 32, "time_steps": 16}},
    "hedge_cosine": {"steps": 16, "mc_paths": 30, "batch_size": 10, "pde": {"space_steps": 32, "time_steps": 16}},
    "cancellation_check": {"steps": 16, "mc_paths": 30, "batch_size": 10, "pde": {"space_steps": 32, "time_steps": 16}},
}


def small_config(stem: str) -> dict:
    """A shipped config with its expensive params scaled down."""
    config = json.loads((CONFIG_DIR / f"{stem}.json").read_text())
    config.setdefault("params", {}).update(_SMALL[stem])
    config.pop("output", None)
    return config


SMALL_CONFIGS = sorted(_SMALL)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip("."))):
            terminalreporter.write_line(line)
