"""Trading at ``n`` equally spaced dates and its convergence to continuous trading.

The trader follows a continuous signal ``Y`` but only rebalances at
``t_i = i T / n``: the position is frozen at ``Y(t_{i-1})`` in between, and at
``t_i`` a block of ``delta_i = Y(t_i) - Y(t_{i-1})`` shares moves the price by
``delta_i f(X-)`` and costs ``delta_i^2 f(X-) / 2`` on top of the marked value.

Everything runs on a fine simulation grid that contains the rebalancing
dates, so ``Z^n`` and the continuous limit ``Z`` see the same Brownian
increments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from impactlab.impact_curve import ImpactCurve
from impactlab.market_model import MarketModel
from impactlab.path_engine import (
    FloatArray,
    PathResult,
    TimeGrid,
    TradingSignal,
    brownian_increments,
    check_domain,
    integrate,
)
from impactlab.stats import ConvergenceTable, grouped_jackknife, map_batches


@dataclass(frozen=True)
class DiscreteRunConfig:
    """Monte Carlo settings for the rebalancing experiments.

    ``base_grid_steps`` is the fine simulation grid; it must be a multiple of
    every rebalancing count used with it.  ``x0`` defaults to the middle of
    the model's price box.
    """

    n: int
    mc_paths: int = 10_000
    base_grid_steps: int = 2048
    seed: int = 0
    x0: float | None = None
    v0: float = 0.0
    batch_size: int = 500
    threads: int = 1

    def __post_init__(self):
        if self.n < 1 or self.mc_paths < 1 or self.batch_size < 1:
            raise ValueError("n, mc_paths and batch_size must be positive")
        if self.base_grid_steps < self.n or self.base_grid_steps % self.n:
            raise ValueError(
                f"base_grid_steps={self.base_grid_steps} must be a multiple of n={self.n}"
            )

    def grid(self, model: MarketModel) -> TimeGrid:
        return TimeGrid(0.0, model.horizon, self.base_grid_steps)

    def start(self, model: MarketModel) -> float:
        if self.x0 is not None:
            return float(self.x0)
        lo, hi = model.price_box
        return 0.5 * (lo + hi) if np.isfinite(lo) and np.isfinite(hi) else 0.0


def rebalance_from_signal(
    model: MarketModel,
    Y: FloatArray,
    dW: FloatArray,
    grid: TimeGrid,
    n: int,
    x0: ArrayLike,
    v0: ArrayLike = 0.0,
) -> PathResult:
    """Discrete-rebalancing paths for a given signal path ``Y`` on ``grid``.

    ``Y`` has shape ``(paths, steps + 1)``.  The returned ``Y`` is the
    piecewise constant position actually held; left limits at the trading
    dates are stored in ``jump_left``.
    """
    n_paths, steps = dW.shape
    if steps % n:
        raise ValueError(f"grid of {steps} steps does not contain the {n} rebalancing dates")
    m = steps // n
    f, mu, sigma = model.impact, model.mu, model.sigma
    dt = grid.dt

    X = np.broadcast_to(np.asarray(x0, dtype=float), (n_paths,)).copy()
    V = np.broadcast_to(np.asarray(v0, dtype=float), (n_paths,)).copy()
    held = Y[:, 0].copy()
    Xs, Ys, Vs = (np.empty((n_paths, steps + 1)) for _ in range(3))
    Xs[:, 0], Ys[:, 0], Vs[:, 0] = X, held, V
    jump_left = {}

    for k in range(steps):
        dX = mu(X) * dt + sigma(X) * dW[:, k]
        V = V + held * dX
        X = X + dX
        node = k + 1
        if node % m == 0:
            jump_left[node] = (X.copy(), held.copy(), V.copy())
            delta = Y[:, node] - held
            fx = f(X)
            move = delta * fx
            V = V + held * move + 0.5 * delta * delta * fx
            X = X + move
            held = Y[:, node].copy()
        check_domain(model, X, node)
        Xs[:, node], Ys[:, node], Vs[:, node] = X, held, V

    meta = {"scheme": "discrete", "n": n, "trading_nodes": list(range(m, steps + 1, m))}
    return PathResult(grid, Xs, Ys, Vs, dW, jump_left, None, None, meta)


def expanded_wealth(model: MarketModel, X: FloatArray, Y: FloatArray, jump_left, v0: ArrayLike = 0.0) -> FloatArray:
    """Wealth at the trading dates from the expanded bookkeeping.

    Sums, per period, the held position times the pre-trade price change plus
    the trade's liquidity cost and the impact on the held shares.  Needs only
    the recorded prices, positions and pre-trade prices; returns an array of
    shape ``(paths, n + 1)`` (start, then after each trade).
    """
    f = model.impact
    nodes = sorted(jump_left)
    n_paths = X.shape[0]
    out = np.empty((n_paths, len(nodes) + 1))
    V = np.broadcast_to(np.asarray(v0, dtype=float), (n_paths,)).copy()
    out[:, 0] = V
    prev = 0
    for i, node in enumerate(nodes, start=1):
        held = Y[:, prev]
        x_minus = jump_left[node][0]
        delta = Y[:, node] - held
        fx = f(x_minus)
        V = V + held * (x_minus - X[:, prev]) + (0.5 * delta * delta * fx + held * delta * fx)
        out[:, i] = V
        prev = node
    return out


def simulate_discrete(
    model: MarketModel,
    signal: TradingSignal,
    cfg: DiscreteRunConfig,
    *,
    dW: FloatArray | None = None,
    path_offset: int = 0,
    curve: ImpactCurve | None = None,
    with_limit: bool = False,
):
    """Rebalance ``cfg.n`` times along ``signal``.

    The signal path (and, with ``with_limit``, the continuous-trading limit)
    is integrated on the fine grid with the same increments.  Returns the
    discrete ``PathResult``, or ``(discrete, limit)``.
    """
    if signal.has_jumps:
        raise ValueError("the rebalancing dynamics take a signal without block orders")
    grid = cfg.grid(model)
    if dW is None:
        dW = brownian_increments(cfg.mc_paths, grid.steps, grid.dt, cfg.seed, path_offset)
    x0 = cfg.start(model)
    limit = integrate(model, signal, grid, dW, x0, cfg.v0, scheme="euler", curve=curve)
    discrete = rebalance_from_signal(model, limit.Y, dW, grid, cfg.n, x0, cfg.v0)
    return (discrete, limit) if with_limit else discrete


def squared_gap(a: PathResult, b: PathResult) -> FloatArray:
    """Per-path, per-node ``|Z_a - Z_b|^2``."""
    return (a.X - b.X) ** 2 + (a.Y - b.Y) ** 2 + (a.V - b.V) ** 2


def convergence_study(
    model: MarketModel,
    signal: TradingSignal,
    n_list,
    cfg: DiscreteRunConfig,
    *,
    curve: ImpactCurve | None = None,
) -> ConvergenceTable:
    """Estimate ``sup_t E|Z^n_t - Z_t|^2`` for each ``n`` at matched noise.

    Paths run in fixed batches of ``cfg.batch_size`` which double as the
    jackknife groups, so results do not depend on ``cfg.threads``.
    """
    n_list = [int(n) for n in n_list]
    if sorted(n_list) != n_list or len(set(n_list)) != len(n_list):
        raise ValueError("n_list must be strictly increasing")
    for n in n_list:
        DiscreteRunConfig(n, cfg.mc_paths, cfg.base_grid_steps, cfg.seed)
    grid = cfg.grid(model)
    curve = curve or model.curve()
    x0 = cfg.start(model)

    def batch(offset: int, count: int):
        dW = brownian_increments(count, grid.steps, grid.dt, cfg.seed, offset)
        limit = integrate(model, signal, grid, dW, x0, cfg.v0, scheme="euler", curve=curve)
        sums = np.empty((len(n_list), grid.steps + 1))
        for i, n in enumerate(n_list):
            disc = rebalance_from_signal(model, limit.Y, dW, grid, n, x0, cfg.v0)
            sums[i] = squared_gap(disc, limit).sum(axis=0)
        return sums, count

    results = map_batches(batch, cfg.mc_paths, cfg.batch_size, cfg.threads)
    group_sums = np.stack([r[0] for r in results])
    counts = np.array([r[1] for r in results], dtype=float)
    est, se = grouped_jackknife(group_sums, counts, lambda mean: mean.max(axis=-1))
    return ConvergenceTable(
        "n",
        np.array(n_list, dtype=float),
        est,
        se,
        error_name="sup_node_mse",
        metadata={
            "mc_paths": cfg.mc_paths,
            "base_grid_steps": cfg.base_grid_steps,
            "seed": cfg.seed,
            "batch_size": cfg.batch_size,
        },
    )
