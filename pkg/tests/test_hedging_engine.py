import numpy as np
import pytest

from impactlab.hedging_engine import (
    HedgeRun,
    SolutionSurface,
    build_feedback_controls,
    cancellation_preconditions,
    liquidation_cancellation_check,
    psi_derivatives,
    replication_study,
    run_hedge,
)
from impactlab.impact_curve import constant_impact, sinusoidal_impact
from impactlab.market_model import (
    MarketModel,
    affine_claim,
    constant_coefficients,
    cosine_claim,
    tanh_coefficients,
)
from impactlab.pricing_pde import PdeGrid, solve


def _setup(impact=None, coefficients=None, claim=None, n=128, strict=True):
    m = MarketModel(
        coefficients or constant_coefficients(0.0, 0.2),
        impact or constant_impact(0.5),
        claim or cosine_claim(),
        (-8.0, 8.0),
        1.0,
        strict=strict,
    )
    return m, solve(m, PdeGrid.for_model(m, n, n))


@pytest.fixture(scope="module")
def cosine_setup():
    return _setup()


@pytest.fixture(scope="module")
def sinusoidal_setup():
    return _setup(impact=sinusoidal_impact(), coefficients=tanh_coefficients())


def test_affine_claim_needs_no_trading():
    m, sol = _setup(claim=affine_claim(0.3, 0.7), n=64)
    surface = SolutionSurface(sol)
    X, Y = np.linspace(-2, 2, 9), np.full(9, 0.7)
    a, b = build_feedback_controls(surface, m, 0.5, X, Y)
    np.testing.assert_allclose(a, 0.0, atol=1e-9)
    np.testing.assert_allclose(b, 0.0, atol=1e-9)


def test_volatility_loading_for_fixed_impact(cosine_setup):
    m, sol = cosine_setup
    surface = SolutionSurface(sol)
    X, Y = np.linspace(-2, 2, 9), np.linspace(-0.5, 0.5, 9)
    a, _ = build_feedback_controls(surface, m, 0.3, X, Y)
    xh = X - 0.5 * Y
    np.testing.assert_allclose(a, 0.2 * surface(0.3, xh, dx=2), atol=1e-12)


def test_psi_matches_surface(sinusoidal_setup):
    m, sol = sinusoidal_setup
    surface = SolutionSurface(sol)
    x = np.linspace(-1, 1, 5)
    psi, psi_x, _, _ = psi_derivatives(surface, m, 0.2, x)
    np.testing.assert_allclose(psi, x + m.impact(x) * surface(0.2, x, dx=1))
    h = 1e-5
    fd = (psi_derivatives(surface, m, 0.2, x + h)[0] - psi_derivatives(surface, m, 0.2, x - h)[0]) / (2 * h)
    np.testing.assert_allclose(psi_x, fd, atol=1e-6)


def test_surface_reproduces_grid_values(cosine_setup):
    _, sol = cosine_setup
    surface = SolutionSurface(sol)
    np.testing.assert_allclose(surface(sol.s[3], sol.x), sol.values[3], atol=1e-12)
    assert surface.contains(np.array([0.0]))
    assert not surface.contains(np.array([100.0]))


def test_opening_trade_lands_on_the_hedge_curve(sinusoidal_setup):
    m, sol = sinusoidal_setup
    report = run_hedge(HedgeRun(m, sol, 0.0, 32, mc_paths=20, keep_paths=True))
    res = report.paths[0]
    surface = SolutionSurface(sol)
    psi0 = psi_derivatives(surface, m, 0.0, np.array([0.0]))[0][0]
    np.testing.assert_allclose(res.X[:, 0], psi0, atol=1e-8)
    np.testing.assert_allclose(res.Y[:, 0], report.initial_position, atol=1e-12)
    # unwinding right after the opening trade returns to the quoted price
    np.testing.assert_allclose(m.curve().flow(res.X[:, 0], -res.Y[:, 0]), 0.0, atol=1e-9)


def test_position_tracks_the_hedge_curve(sinusoidal_setup):
    m, sol = sinusoidal_setup
    curve = m.curve()
    surface = SolutionSurface(sol)
    gaps = []
    for n in (64, 256):
        res = run_hedge(HedgeRun(m, sol, 0.0, n, mc_paths=50, keep_paths=True, noise_steps=256), curve=curve).paths[0]
        k = n // 2
        X, Y = res.X[:, k], res.Y[:, k]
        xh = curve.flow(X, -Y)
        psi = psi_derivatives(surface, m, res.grid.times[k], xh)[0]
        gaps.append(np.sqrt(np.mean((X - psi) ** 2)))
    assert gaps[1] < gaps[0]
    assert gaps[1] < 5e-3


def test_wealth_shift_moves_every_error(cosine_setup):
    m, sol = cosine_setup
    base = run_hedge(HedgeRun(m, sol, 0.0, 64, mc_paths=100, seed=4))
    shifted = run_hedge(HedgeRun(m, sol, 0.0, 64, mc_paths=100, seed=4, v=base.initial_wealth + 0.25))
    np.testing.assert_allclose(shifted.errors - base.errors, 0.25, atol=1e-12)


def test_deterministic_market_replicates_exactly():
    m, sol = _setup(coefficients=constant_coefficients(0.0, 0.0), strict=False, n=64)
    # start on a grid node so the price needs no interpolation
    report = run_hedge(HedgeRun(m, sol, 0.25, 16, mc_paths=5))
    assert report.max_abs < 1e-10


def test_error_shrinks_with_rebalancing(cosine_setup):
    m, sol = cosine_setup
    table, reports = replication_study(m, {32: sol, 128: sol}, 0.0, mc_paths=400, seed=2)
    assert table.errors[1] < 0.7 * table.errors[0]
    assert all(r.valid for r in reports.values())
    assert reports[128].relative_rms < 0.05


def test_thread_count_does_not_change_errors(cosine_setup):
    m, sol = cosine_setup
    one = run_hedge(HedgeRun(m, sol, 0.0, 32, mc_paths=60, batch_size=20, threads=1))
    three = run_hedge(HedgeRun(m, sol, 0.0, 32, mc_paths=60, batch_size=20, threads=3))
    np.testing.assert_array_equal(one.errors, three.errors)


def test_cancellation_identity(cosine_setup):
    m, sol = cosine_setup
    check = liquidation_cancellation_check(HedgeRun(m, sol, 0.0, 64, mc_paths=50, keep_paths=True))
    assert check.status == "checked"
    assert check.max_abs < 1e-10


def test_cancellation_is_skipped_off_its_assumptions(sinusoidal_setup):
    m, sol = sinusoidal_setup
    check = liquidation_cancellation_check(HedgeRun(m, sol, 0.0, 8, mc_paths=4))
    assert check.status == "skipped"
    assert check.residuals is None
    m2 = MarketModel(tanh_coefficients(), constant_impact(0.5), cosine_claim(), (-8.0, 8.0), 1.0)
    assert "volatility" in cancellation_preconditions(m2)


def test_run_validation(cosine_setup):
    m, sol = cosine_setup
    with pytest.raises(ValueError, match="edge"):
        HedgeRun(m, sol, 7.9, 8)
    with pytest.raises(ValueError, match="multiple"):
        HedgeRun(m, sol, 0.0, 8, noise_steps=12)
    with pytest.raises(ValueError):
        HedgeRun(m, sol, 0.0, 0)


def test_summary_fields(cosine_setup, tmp_path):
    m, sol = cosine_setup
    report = run_hedge(HedgeRun(m, sol, 0.0, 16, mc_paths=10))
    s = report.summary()
    assert s["paths"] == 10 and s["steps"] == 16 and s["valid"]
    report.to_csv(tmp_path / "e.csv", header_comment="abc")
    assert (tmp_path / "e.csv").read_text().startswith("# config_sha256=abc")
