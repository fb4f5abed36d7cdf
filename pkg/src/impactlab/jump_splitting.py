"""Block orders executed as short continuous ramps.

A block of ``delta`` shares at ``tau`` is replaced by buying at the constant
rate ``delta / eps`` on ``[tau, tau + eps]``.  As ``eps`` shrinks the split
dynamics, compared at ``T + eps``, approach the block-order dynamics at ``T``
with squared error of order ``eps``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from impactlab.exceptions import SeparationError
from impactlab.impact_curve import ImpactCurve
from impactlab.market_model import MarketModel
from impactlab.path_engine import (
    FloatArray,
    PathResult,
    Scheme,
    TimeGrid,
    TradingSignal,
    brownian_increments,
    coarsen,
    integrate,
)
from impactlab.stats import ConvergenceTable, grouped_jackknife, map_batches


@dataclass(frozen=True)
class SplitConfig:
    epsilon_list: tuple[float, ...]
    mc_paths: int = 4000
    seed: int = 0
    steps_per_epsilon: int = 32
    x0: float | None = None
    v0: float = 0.0
    batch_size: int = 250
    threads: int = 1

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilon_list)
        object.__setattr__(self, "epsilon_list", eps)
        if not eps or any(e <= 0 for e in eps):
            raise ValueError("epsilon_list must hold positive values")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon_list must be strictly decreasing")
        if self.steps_per_epsilon < 32:
            raise ValueError("each ramp needs at least 32 grid steps")
        for e in eps:
            ratio = e / eps[-1]
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError("every epsilon must be an integer multiple of the smallest one")

    def start(self, model: MarketModel) -> float:
        if self.x0 is not None:
            return float(self.x0)
        lo, hi = model.price_box
        return 0.5 * (lo + hi) if np.isfinite(lo) and np.isfinite(hi) else 0.0


def split_grid(horizon: float, epsilon: float, steps_per_epsilon: int = 32) -> TimeGrid:
    """Grid on ``[0, T + eps]`` with step ``eps / steps_per_epsilon`` that contains ``T``."""
    dt = epsilon / steps_per_epsilon
    steps_T = round(horizon / dt)
    if abs(steps_T * dt - horizon) > 1e-9 * horizon:
        raise ValueError(f"horizon {horizon} is not a multiple of the step {dt}")
    return TimeGrid(0.0, horizon + epsilon, steps_T + steps_per_epsilon)


def check_separation(signal: TradingSignal, epsilon: float) -> None:
    times = [j.time for j in signal.jumps]
    for t1, t2 in zip(times, times[1:]):
        if t2 - t1 < epsilon:
            raise SeparationError(
                f"block orders at t={t1} and t={t2} are closer than the splitting window {epsilon}"
            )


def ramps_for(signal: TradingSignal, epsilon: float) -> list[tuple[float, float, float]]:
    ramps = []
    for j in signal.jumps:
        if callable(j.size):
            raise ValueError("state-dependent block sizes cannot be split ahead of time")
        ramps.append((j.time, epsilon, float(j.size)))
    return ramps


def simulate_split(
    model: MarketModel,
    signal: TradingSignal,
    epsilon: float,
    grid: TimeGrid,
    seed: int | None = None,
    *,
    x0: ArrayLike,
    v0: ArrayLike = 0.0,
    paths: int = 1,
    dW: FloatArray | None = None,
    path_offset: int = 0,
    scheme: Scheme = "euler",
    curve: ImpactCurve | None = None,
    record: bool = True,
) -> PathResult:
    """Integrate the dynamics with every block order spread over ``epsilon``.

    ``grid`` must reach past the last ramp; use :func:`split_grid` to run to
    ``T + epsilon``.  The signal's ``(a, b)`` continue unchanged during the
    ramps and beyond ``T``.
    """
    check_separation(signal, epsilon)
    ramps = ramps_for(signal, epsilon)
    for start, dur, _ in ramps:
        if start + dur > grid.T + 1e-12:
            raise ValueError(f"ramp starting at {start} runs past the grid end {grid.T}")
    if dW is None:
        if seed is None:
            raise ValueError("either a seed or explicit Brownian increments are required")
        dW = brownian_increments(paths, grid.steps, grid.dt, seed, path_offset)
    out = integrate(
        model, signal.without_jumps(), grid, dW, x0, v0, scheme=scheme, curve=curve, record=record, ramps=ramps
    )
    out.metadata["epsilon"] = epsilon
    out.metadata["ramps"] = ramps
    return out


def splitting_convergence(
    model: MarketModel,
    signal: TradingSignal,
    cfg: SplitConfig,
    *,
    curve: ImpactCurve | None = None,
) -> ConvergenceTable:
    """Estimate ``E|Z^eps_{T+eps} - Z_T|^2`` for each ``eps`` at matched noise.

    Increments are drawn once on the grid of the smallest ``eps`` and summed
    up to each coarser grid, so every run (and its block-order reference on
    the same grid) is driven by the same Brownian path.
    """
    eps_list = cfg.epsilon_list
    check_separation(signal, eps_list[0])
    curve = curve or model.curve()
    T = model.horizon
    spe = cfg.steps_per_epsilon
    eps_min = eps_list[-1]
    fine = split_grid(T, eps_list[0], spe * round(eps_list[0] / eps_min))
    x0 = cfg.start(model)

    def batch(offset: int, count: int):
        dW_fine = brownian_increments(count, fine.steps, fine.dt, cfg.seed, offset)
        sums = np.empty(len(eps_list))
        for i, eps in enumerate(eps_list):
            factor = round(eps / eps_min)
            grid = split_grid(T, eps, spe)
            dW = coarsen(dW_fine[:, : grid.steps * factor], factor)
            steps_T = grid.steps - spe
            ref = integrate(
                model, signal, TimeGrid(0.0, T, steps_T), dW[:, :steps_T], x0, cfg.v0,
                curve=curve, record=False,
            )
            split = simulate_split(model, signal, eps, grid, dW=dW, x0=x0, v0=cfg.v0, curve=curve, record=False)
            gap = (split.X[:, 0] - ref.X[:, 0]) ** 2 + (split.Y[:, 0] - ref.Y[:, 0]) ** 2 + (split.V[:, 0] - ref.V[:, 0]) ** 2
            sums[i] = gap.sum()
        return sums, count

    results = map_batches(batch, cfg.mc_paths, cfg.batch_size, cfg.threads)
    group_sums = np.stack([r[0] for r in results])
    counts = np.array([r[1] for r in results], dtype=float)
    est, se = grouped_jackknife(group_sums, counts, lambda mean: mean)
    return ConvergenceTable(
        "epsilon",
        np.array(eps_list),
        est,
        se,
        error_name="mse",
        metadata={"mc_paths": cfg.mc_paths, "seed": cfg.seed, "steps_per_epsilon": spe},
    )


def deterministic_split_gap(
    model: MarketModel,
    x: float,
    y: float,
    v: float,
    delta: float,
    epsilon: float,
    *,
    steps_per_epsilon: int = 32,
    curve: ImpactCurve | None = None,
) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    """Split one block order with no noise and compare with the jump map.

    Meant for models with zero drift and volatility; returns the split end
    state and the jump-map state.
    """
    curve = curve or model.curve()
    sig = TradingSignal(y0=y, jumps=((0.0, delta),))
    grid = TimeGrid(0.0, epsilon, steps_per_epsilon)
    run = simulate_split(model, sig, epsilon, grid, dW=np.zeros((1, grid.steps)), x0=x, v0=v, curve=curve)
    end = run.state(grid.steps)
    jx, jy, jv = curve.round_trip_state(x, y, v, delta)
    return (end.X, end.Y, end.V), (float(jx), float(jy), float(jv))

