"""Replicating a claim with the feedback strategy read off a solved price.

Let ``psi(t, x) = x + f(x) w_x(t, x)``.  The strategy keeps the market
price on the curve ``X = psi(t, Xhat)`` where ``Xhat = flow(X, -Y)`` is the
price left after an instant unwind.  Writing that constraint with Ito's
formula gives, per step, the volatility and drift loadings of the position:

    sigma(X) + f(X) a = hat_sigma psi_x
    f(X) b + mu(X) + a sigma(X) f'(X)
        = psi_t + drift_hat psi_x + 0.5 hat_sigma^2 psi_xx

with ``hat_sigma = sigma(X) f(Xhat) / f(X)`` and the drift of ``Xhat``

    drift_hat = 0.5 sigma(X)^2 f(Xhat) (f'(Xhat) - f'(X)) / f(X)^2
              + f(Xhat) / f(X) * (mu(X) - 0.5 a^2 f(X) f'(X)),

all ``psi`` derivatives taken at ``(t, Xhat)``.  A run opens with a block
order to ``y_hat(t, x)``, trades ``(a, b)`` until ``T`` and closes with a
block order to the delivered quantity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray
from scipy.interpolate import RectBivariateSpline

from impactlab.exceptions import DomainEscapeError
from impactlab.impact_curve import ImpactCurve
from impactlab.io import write_columns, write_json
from impactlab.market_model import MarketModel
from impactlab.path_engine import (
    Jump,
    PathResult,
    Scheme,
    TimeGrid,
    TradingSignal,
    brownian_increments,
    coarsen,
    integrate,
)
from impactlab.pricing_pde import FlowChart, PdeSolution, SolverOptions, terminal_data
from impactlab.stats import ConvergenceTable, map_batches

FloatArray = NDArray[np.float64]


class SolutionSurface:
    """Smooth interpolant of ``w`` and its derivatives on the solution grid.

    Quintic in price so that ``w_xxx`` is continuous, cubic in time.
    """

    def __init__(self, solution: PdeSolution):
        self.solution = solution
        self.s = solution.s
        self.x = solution.x
        self._spline = RectBivariateSpline(self.s, self.x, solution.values, kx=3, ky=5)
        self._partials = {(0, 0): self._spline}

    def contains(self, x: FloatArray, margin: float = 0.0) -> bool:
        return bool(np.all((x >= self.x[0] + margin) & (x <= self.x[-1] - margin)))

    def __call__(self, t, x, dt: int = 0, dx: int = 0) -> FloatArray:
        x = np.asarray(x, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape)
        key = (dt, dx)
        if key not in self._partials:
            # evaluating derivatives through ev() rebuilds them on every call
            self._partials[key] = self._spline.partial_derivative(dt, dx)
        return self._partials[key](t, x, grid=False)


@dataclass(frozen=True)
class ControlCap:
    limit: float = 1e3
    max_fraction: float = 1e-3


def psi_derivatives(surface: SolutionSurface, model: MarketModel, t: float, xh: FloatArray):
    """``psi, psi_x, psi_xx, psi_t`` at ``(t, xh)``."""
    f = model.impact
    w1 = surface(t, xh, dx=1)
    w2 = surface(t, xh, dx=2)
    w3 = surface(t, xh, dx=3)
    w1t = surface(t, xh, dt=1, dx=1)
    fx, f1, f2 = f(xh), f.prime(xh), f.second(xh)
    psi = xh + fx * w1
    psi_x = 1.0 + f1 * w1 + fx * w2
    psi_xx = f2 * w1 + 2.0 * f1 * w2 + fx * w3
    psi_t = fx * w1t
    return psi, psi_x, psi_xx, psi_t


def build_feedback_controls(
    surface: SolutionSurface,
    model: MarketModel,
    t: float,
    X: FloatArray,
    Y: FloatArray,
    *,
    xhat: FloatArray | None = None,
    curve: ImpactCurve | None = None,
) -> tuple[FloatArray, FloatArray]:
    """Loadings ``(a, b)`` that keep the state on ``X = psi(t, flow(X, -Y))``."""
    f, mu, sigma = model.impact, model.mu, model.sigma
    X = np.asarray(X, dtype=float)
    if xhat is None:
        curve = curve or model.curve()
        xhat = np.asarray(curve.flow(X, -np.asarray(Y, dtype=float)), dtype=float)
    _, psi_x, psi_xx, psi_t = psi_derivatives(surface, model, t, xhat)
    fX, fh = f(X), f(xhat)
    dfX, dfh = f.prime(X), f.prime(xhat)
    sX, mX = sigma(X), mu(X)
    hat_sigma = sX * fh / fX
    a = (hat_sigma * psi_x - sX) / fX
    drift_hat = 0.5 * sX**2 * fh * (dfh - dfX) / fX**2 + fh / fX * (mX - 0.5 * a * a * fX * dfX)
    b = (psi_t + drift_hat * psi_x + 0.5 * hat_sigma**2 * psi_xx - mX - a * sX * dfX) / fX
    return a, b


@dataclass
class HedgeRun:
    """One replication experiment.

    ``v`` defaults to the solved price ``w(t0, x)``; ``steps`` is the number
    of trading steps on ``[t0, T]``.  With ``noise_steps`` set (a multiple
    of ``steps``) the Brownian increments are drawn on that finer grid and
    summed, so runs at different ``steps`` share the same paths.
    """

    model: MarketModel
    solution: PdeSolution
    x: float
    steps: int
    mc_paths: int = 1000
    seed: int = 0
    v: float | None = None
    scheme: Scheme = "rebalance"
    cap: ControlCap = field(default_factory=ControlCap)
    batch_size: int = 250
    threads: int = 1
    keep_paths: bool = False
    noise_steps: int | None = None

    def __post_init__(self):
        margin = 0.05 * (self.solution.x[-1] - self.solution.x[0])
        if not (self.solution.x[0] + margin <= self.x <= self.solution.x[-1] - margin):
            raise ValueError(f"initial price {self.x} is too close to the edge of the solution grid")
        if self.steps < 1 or self.mc_paths < 1:
            raise ValueError("steps and mc_paths must be positive")
        if self.noise_steps is not None and self.noise_steps % self.steps:
            raise ValueError("noise_steps must be a multiple of steps")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.solution.grid.t0, self.solution.grid.T, self.steps)


@dataclass
class HedgeReport:
    """Per-path terminal errors ``V_T - Y_T X_T - g0(X_T)`` and summaries."""

    errors: FloatArray
    payoff: FloatArray
    initial_wealth: float
    initial_position: float
    capped_steps: int
    total_steps: int
    valid: bool
    diagnostics: dict[str, Any] = field(default_factory=dict)
    paths: list[PathResult] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(self.errors.mean())

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.errors**2)))

    @property
    def max_abs(self) -> float:
        return float(np.abs(self.errors).max())

    @property
    def rms_payoff(self) -> float:
        return float(np.sqrt(np.mean(self.payoff**2)))

    @property
    def relative_rms(self) -> float:
        return self.rms / self.rms_payoff

    def summary(self) -> dict[str, Any]:
        out = {
            "paths": int(self.errors.size),
            "mean_error": self.mean,
            "rms_error": self.rms,
            "max_abs_error": self.max_abs,
            "min_error": float(self.errors.min()),
            "rms_payoff": self.rms_payoff,
            "relative_rms": self.relative_rms,
            "initial_wealth": self.initial_wealth,
            "initial_position": self.initial_position,
            "capped_steps": self.capped_steps,
            "total_steps": self.total_steps,
            "valid": self.valid,
        }
        out.update(self.diagnostics)
        return out

    def to_csv(self, path: str | Path, header_comment: str | None = None) -> None:
        write_columns(
            path,
            {"path": np.arange(self.errors.size), "error": self.errors, "payoff": self.payoff},
            header_comment=header_comment,
        )

    def write_summary(self, path: str | Path, extra: dict[str, Any] | None = None) -> None:
        data = self.summary()
        data.update(extra or {})
        write_json(path, data)


class _Unwinder:
    """Closing order: from ``Y`` to the delivered quantity at ``Xhat``."""

    def __init__(self, model: MarketModel, curve: ImpactCurve, unwind_price):
        self.model = model
        self.curve = curve
        self.unwind_price = unwind_price

    def __call__(self, t, X, Y, V):
        q = self.model.claim.delivery
        if q is not None:
            return q - Y
        xh = self.unwind_price(X, Y)
        target = terminal_data(self.model, xh, curve=self.curve, options=SolverOptions()).position
        return target - Y


def _unwind_price_fn(model: MarketModel, curve: ImpactCurve, solution: PdeSolution):
    lam = model.impact.constant_value
    if lam is not None:
        return lambda X, Y: X - lam * Y
    lo, hi = solution.x[0], solution.x[-1]
    pad = 0.5 * (hi - lo)
    free = ImpactCurve(model.impact, ode_step=curve.ode_step, newton_tol=curve.newton_tol)
    chart = FlowChart(free, lo - pad, hi + pad, points=16385)
    return lambda X, Y: chart.phi(chart.U(X) - Y)


def run_hedge(run: HedgeRun, *, curve: ImpactCurve | None = None) -> HedgeReport:
    """Simulate the replication strategy on every path and settle the claim."""
    model, sol = run.model, run.solution
    curve = curve or model.curve()
    surface = SolutionSurface(sol)
    grid = run.grid
    t0 = grid.t0
    v0 = float(surface(t0, np.array([run.x]))[0]) if run.v is None else float(run.v)
    w1 = float(surface(t0, np.array([run.x]), dx=1)[0])
    y_open = float(curve.inverse_flow(run.x, run.x + float(model.impact(run.x)) * w1))
    unwind_price = _unwind_price_fn(model, curve, sol)
    cap = run.cap.limit

    def batch(offset: int, count: int):
        hits = [0]

        def feedback(k, t, X, Y, V):
            xh = unwind_price(X, Y)
            if not surface.contains(xh):
                raise DomainEscapeError(
                    f"post-liquidation price left the solution grid at t={t:.6g}",
                    values=xh[(xh < surface.x[0]) | (xh > surface.x[-1])],
                )
            a, b = build_feedback_controls(surface, model, t, X, Y, xhat=xh)
            over = (np.abs(a) > cap) | (np.abs(b) > cap)
            hits[0] += int(over.sum())
            return np.clip(a, -cap, cap), np.clip(b, -cap, cap)

        signal = TradingSignal(
            y0=0.0,
            feedback=feedback,
            jumps=(Jump(t0, y_open), Jump(grid.T, _Unwinder(model, curve, unwind_price))),
        )
        if run.noise_steps is None:
            dW = brownian_increments(count, grid.steps, grid.dt, run.seed, offset)
        else:
            fine = TimeGrid(grid.t0, grid.T, run.noise_steps)
            dW = coarsen(brownian_increments(count, fine.steps, fine.dt, run.seed, offset), fine.steps // grid.steps)
        res = integrate(model, signal, grid, dW, run.x, v0, scheme=run.scheme, curve=curve, record=True)
        X_T, Y_T, V_T = res.terminal()
        payoff = Y_T * X_T + model.claim.g0(X_T)
        return V_T - payoff, payoff, hits[0], res

    results = map_batches(batch, run.mc_paths, run.batch_size, run.threads)
    errors = np.concatenate([r[0] for r in results])
    payoff = np.concatenate([r[1] for r in results])
    capped = int(sum(r[2] for r in results))
    total = run.mc_paths * grid.steps
    valid = capped <= run.cap.max_fraction * total
    paths = [r[3] for r in results] if run.keep_paths else []
    diagnostics = {
        "scheme": run.scheme,
        "steps": run.steps,
        "seed": run.seed,
        "pde_space_steps": sol.grid.space_steps,
        "pde_time_steps": sol.grid.time_steps,
    }
    return HedgeReport(errors, payoff, v0, y_open, capped, total, valid, diagnostics, paths)


def replication_study(
    model: MarketModel,
    solutions: dict[int, PdeSolution],
    x: float,
    *,
    mc_paths: int = 1000,
    seed: int = 0,
    scheme: Scheme = "rebalance",
    batch_size: int = 250,
    threads: int = 1,
    curve: ImpactCurve | None = None,
) -> tuple[ConvergenceTable, dict[int, HedgeReport]]:
    """RMS replication error against the step count at matched noise.

    ``solutions`` maps each step count to the price surface used for it.
    """
    steps_list = sorted(solutions)
    finest = steps_list[-1]
    reports = {}
    for n in steps_list:
        run = HedgeRun(
            model, solutions[n], x, n, mc_paths=mc_paths, seed=seed, scheme=scheme,
            batch_size=batch_size, threads=threads, noise_steps=finest,
        )
        reports[n] = run_hedge(run, curve=curve)
    rms = np.array([reports[n].rms for n in steps_list])
    # delta method on the mean of squared errors
    se = np.array([np.std(reports[n].errors**2, ddof=1) / np.sqrt(mc_paths) for n in steps_list]) / (2 * rms)
    table = ConvergenceTable(
        "dt",
        np.array([model.horizon / n for n in steps_list]),
        rms,
        se,
        error_name="rms_error",
        metadata={"mc_paths": mc_paths, "seed": seed, "steps": steps_list},
    )
    return table, reports


@dataclass
class CancellationReport:
    status: str
    residuals: FloatArray | None = None
    detail: str = ""

    @property
    def max_abs(self) -> float:
        return float(np.abs(self.residuals).max()) if self.residuals is not None and self.residuals.size else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {"status": self.status, "detail": self.detail, "max_abs_residual": self.max_abs}


def cancellation_preconditions(model: MarketModel, samples: int = 257) -> str | None:
    """Why the cancellation identity does not apply, or ``None`` if it does."""
    if model.impact.constant_value is None:
        return "impact is not constant"
    lo, hi = model.price_box
    if not (np.isfinite(lo) and np.isfinite(hi)):
        lo, hi = -1.0, 1.0
    xs = np.linspace(lo, hi, samples)
    sig = model.sigma(xs)
    if np.ptp(sig) > 0:
        return "volatility is not constant"
    if np.any(model.mu(xs) != 0):
        return "drift is not zero"
    if model.claim.g1_kind != "zero":
        return "claim delivers shares"
    return None


def liquidation_cancellation_check(run: HedgeRun, report: HedgeReport | None = None) -> CancellationReport:
    """Check ``V_T = v + sum_k Y_k sigma dW_k`` path by path.

    With constant impact and volatility, zero drift and no delivery, the
    liquidity costs of the opening, running and closing trades cancel.
    Requires the run's paths (``keep_paths=True``).
    """
    model = run.model
    reason = cancellation_preconditions(model)
    if reason is not None:
        return CancellationReport("skipped", None, f"identity needs constant coefficients: {reason}")
    if report is None:
        run = HedgeRun(**{**run.__dict__, "keep_paths": True})
        report = run_hedge(run)
    if not report.paths:
        raise ValueError("the hedge report carries no paths; rerun with keep_paths=True")
    sigma0 = float(model.sigma(np.array([model.price_box[0] if np.isfinite(model.price_box[0]) else 0.0]))[0])
    residuals = []
    for res in report.paths:
        gains = np.sum(res.Y[:, :-1] * sigma0 * res.dW, axis=1)
        residuals.append(res.V[:, -1] - report.initial_wealth - gains)
    r = np.concatenate(residuals)
    return CancellationReport("checked", r, f"{r.size} paths")
