"""Experiment runners behind ``impactlab run``.

Each runner takes a validated config, writes its artifacts into ``out_dir``
and returns an :class:`ExperimentResult`.  Every CSV starts with the
``# config_sha256=`` line and every JSON carries a ``config_sha256`` key, so
an artifact can always be traced to the config that made it.  Nothing here
records wall-clock time; the manifest written by the CLI does that, which
keeps the artifacts themselves byte-reproducible.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from impactlab.discrete_rebalance import DiscreteRunConfig, convergence_study
from impactlab.exceptions import ConfigError, ImpactLabError, ModelValidationError
from impactlab.hedging_engine import (
    ControlCap,
    HedgeRun,
    SolutionSurface,
    liquidation_cancellation_check,
    run_hedge,
)
from impactlab.impact_curve import identity_residuals
from impactlab.io import config_hash, write_columns, write_json
from impactlab.jump_splitting import SplitConfig, splitting_convergence
from impactlab.market_model import MarketModel, build_model
from impactlab.path_engine import Jump, TradingSignal
from impactlab.pricing_pde import PdeGrid, SolverOptions, solve, solve_transformed


@dataclass
class ExperimentResult:
    kind: str
    artifacts: list[Path]
    summary: dict[str, Any] = field(default_factory=dict)


@contextlib.contextmanager
def _as_config_error(where: str):
    """Bad parameter combinations found while building objects are config errors."""
    try:
        yield
    except ImpactLabError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        err = ConfigError(f"{where}: {exc}")
        err.details = [{"path": where, "message": str(exc)}]
        raise err from exc


def _model(config: dict[str, Any]) -> MarketModel:
    described = config["model"]
    with _as_config_error("model"):
        try:
            return build_model(described, strict=described.get("strict", True))
        except ModelValidationError as exc:
            # a model that fails its own checks is a bad config, not a numerical failure
            raise ValueError(str(exc)) from exc


def _signal(params: dict[str, Any] | None, default_jumps=()) -> TradingSignal:
    p = dict(params or {})
    jumps = tuple(Jump(float(t), float(d)) for t, d in p.pop("jumps", default_jumps))
    return TradingSignal(y0=p.get("y0", 0.0), a=p.get("a", 0.5), b=p.get("b", 0.0), jumps=jumps, bound=p.get("bound", np.inf))


def _middle(model: MarketModel) -> float:
    lo, hi = model.price_box
    return 0.5 * (lo + hi) if np.isfinite(lo) and np.isfinite(hi) else 0.0


class _Writer:
    def __init__(self, out_dir: Path, digest: str):
        self.out_dir = out_dir
        self.digest = digest
        self.paths: list[Path] = []

    def columns(self, name: str, columns: dict[str, Any]) -> Path:
        path = self.out_dir / name
        write_columns(path, columns, header_comment=self.digest)
        self.paths.append(path)
        return path

    def table(self, name: str, table) -> Path:
        path = self.out_dir / name
        table.to_csv(path, header_comment=self.digest)
        self.paths.append(path)
        return path

    def json(self, name: str, data: dict[str, Any]) -> Path:
        path = self.out_dir / name
        write_json(path, {**data, "config_sha256": self.digest})
        self.paths.append(path)
        return path


# -- runners -------------------------------------------------------------------------

def _curve_check(config, model, params, out: _Writer, threads: int) -> dict[str, Any]:
    rng = np.random.default_rng(config["seed"])
    n = params.get("samples", 1000)
    lo, hi = model.price_box
    mid, half = _middle(model), 0.25 * (hi - lo) if np.isfinite(hi - lo) else 1.0
    x_lo, x_hi = params.get("x_range", [mid - half, mid + half])
    reach = params.get("order_range", 1.0)
    curve = model.curve()
    if "ode_step" in params:
        with _as_config_error("params/ode_step"):
            curve = replace(curve, ode_step=params["ode_step"])
    x = rng.uniform(x_lo, x_hi, n)
    y = rng.uniform(-reach, reach, n)
    iota = rng.uniform(-reach, reach, n)
    v = rng.uniform(-1.0, 1.0, n)
    res = identity_residuals(curve, x, y, iota)
    there = curve.round_trip_state(x, np.zeros(n), v, y)
    back = curve.round_trip_state(*there, -y)
    trip = {"round_trip_x": back[0] - x, "round_trip_y": back[1], "round_trip_v": back[2] - v}
    out.columns("curve_identities.csv", {"x": x, "y": y, "iota": iota, "v": v, **res, **trip})
    tol = params.get("tolerance", 1e-8)
    trip_tol = params.get("round_trip_tolerance", 1e-9)
    worst = {k: float(np.abs(r).max()) for k, r in res.items()}
    worst_trip = {k: float(np.abs(r).max()) for k, r in trip.items()}
    summary = {
        "samples": n,
        "max_abs_residual": worst,
        "max_abs_round_trip": worst_trip,
        "tolerance": tol,
        "round_trip_tolerance": trip_tol,
        "identities_pass": max(worst.values()) <= tol,
        "round_trip_pass": max(worst_trip.values()) <= trip_tol,
    }
    out.json("curve_check.json", summary)
    return summary


def _discrete(config, model, params, out: _Writer, threads: int) -> dict[str, Any]:
    n_list = params.get("n_list", [8, 16, 32, 64, 128])
    with _as_config_error("params"):
        signal = _signal(params.get("signal"))
        cfg = DiscreteRunConfig(
            n=max(n_list),
            mc_paths=params.get("mc_paths", 10_000),
            base_grid_steps=params.get("base_grid_steps", 2048),
            seed=config["seed"],
            x0=params.get("x0"),
            batch_size=params.get("batch_size", 500),
            threads=threads,
        )
    table = convergence_study(model, signal, n_list, cfg)
    out.table("discrete_convergence.csv", table)
    summary = {"slope": table.slope, "fit_residual": table.residual, **table.metadata, "n_list": n_list}
    out.json("discrete_convergence.json", summary)
    return summary


def _split(config, model, params, out: _Writer, threads: int) -> dict[str, Any]:
    T = model.horizon
    eps = params.get("epsilon_list", [T * 2.0**-k for k in range(4, 9)])
    with _as_config_error("params"):
        signal = _signal(params.get("signal"), default_jumps=((0.5 * T, 1.0),))
        cfg = SplitConfig(
            tuple(eps),
            mc_paths=params.get("mc_paths", 4000),
            seed=config["seed"],
            steps_per_epsilon=params.get("steps_per_epsilon", 32),
            x0=params.get("x0"),
            batch_size=params.get("batch_size", 250),
            threads=threads,
        )
    table = splitting_convergence(model, signal, cfg)
    out.table("split_convergence.csv", table)
    summary = {"slope": table.slope, "fit_residual": table.residual, **table.metadata, "epsilon_list": list(eps)}
    out.json("split_convergence.json", summary)
    return summary


def _pde_setup(model, pde: dict[str, Any], default_steps: int = 256):
    with _as_config_error("params/pde"):
        grid = PdeGrid.for_model(
            model,
            pde.get("space_steps", default_steps),
            pde.get("time_steps", default_steps),
            box=pde.get("box"),
        )
        options = SolverOptions(
            theta=pde.get("theta", 0.5),
            rannacher_steps=pde.get("rannacher_steps", 2),
            picard_tol=pde.get("picard_tol", 1e-9),
            picard_max_iter=pde.get("picard_max_iter", 50),
        )
    return grid, options, pde.get("k_bound")


def _price(config, model, params, out: _Writer, threads: int) -> dict[str, Any]:
    grid, options, k_bound = _pde_setup(model, params.get("pde", {}))
    if params.get("solver", "direct") == "transformed":
        sol = solve_transformed(model, grid, params.get("rho", 1.0), options=options, k_bound=k_bound)
    else:
        sol = solve(model, grid, options=options, k_bound=k_bound)
    out.table("w_grid.csv", sol)
    x = sol.x
    j = int(np.argmin(np.abs(x - _middle(model))))
    summary = {**sol.diagnostics, "x_mid": float(x[j]), "w_t0_x_mid": float(sol.values[0, j])}
    out.json("pde_diagnostics.json", summary)
    return summary


def _hedge_run(config, model, params, threads: int, keep_paths: bool = False) -> HedgeRun:
    steps = params.get("steps", 512)
    grid, options, k_bound = _pde_setup(model, params.get("pde", {}), default_steps=steps)
    sol = solve(model, grid, options=options, k_bound=k_bound)
    x0 = params.get("x0", _middle(model))
    with _as_config_error("params"):
        v = None
        if "wealth_shift" in params:
            v = float(SolutionSurface(sol)(grid.t0, np.array([x0]))[0]) + params["wealth_shift"]
        return HedgeRun(
            model,
            sol,
            x0,
            steps,
            mc_paths=params.get("mc_paths", 1000),
            seed=config["seed"],
            v=v,
            scheme=params.get("scheme", "rebalance"),
            cap=ControlCap(limit=params.get("control_cap", 1e3)),
            batch_size=params.get("batch_size", 250),
            threads=threads,
            keep_paths=keep_paths,
        )


def _hedge(config, model, params, out: _Writer, threads: int) -> dict[str, Any]:
    report = run_hedge(_hedge_run(config, model, params, threads))
    out.columns("hedge_errors.csv", {"path": np.arange(report.errors.size), "error": report.errors, "payoff": report.payoff})
    summary = report.summary()
    out.json("hedge_summary.json", summary)
    return summary


def _cancellation(config, model, params, out: _Writer, threads: int) -> dict[str, Any]:
    run = _hedge_run(config, model, params, threads, keep_paths=True)
    check = liquidation_cancellation_check(run)
    if check.residuals is not None:
        out.columns("cancellation_residuals.csv", {"path": np.arange(check.residuals.size), "residual": check.residuals})
    summary = check.to_dict()
    out.json("cancellation.json", summary)
    return summary


RUNNERS: dict[str, Callable[..., dict[str, Any]]] = {
    "curve-check": _curve_check,
    "discrete-convergence": _discrete,
    "split-convergence": _split,
    "price": _price,
    "hedge": _hedge,
    "cancellation-check": _cancellation,
}


def run_experiment(config: dict[str, Any], out_dir: str | Path, threads: int = 1) -> ExperimentResult:
    """Run a validated config and write its artifacts into ``out_dir``."""
    kind = config["experiment"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    writer = _Writer(out_dir, config_hash(config))
    model = _model(config)
    summary = RUNNERS[kind](config, model, config.get("params", {}), writer, threads)
    return ExperimentResult(kind, writer.paths, summary)
