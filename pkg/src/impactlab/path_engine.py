"""Brownian paths and the continuous-time trading dynamics.

Between block orders the state ``Z = (X, Y, V)`` follows

    dY = b dt + a dW
    dX = sigma(X) dW + f(X) dY + (mu(X) + a sigma(X) f'(X)) dt
    dV = Y dX + 0.5 a^2 f(X) dt

and a block order ``delta`` applies the jump map of
:meth:`ImpactCurve.round_trip_state`.

Two step rules are available.  ``"euler"`` is Euler-Maruyama on the system
above.  ``"rebalance"`` trades the signal increment once per step through the
linear impact rule (diffusion move first, then a trade of ``b dt + a dW``
shares moving the price by ``f`` times the size and costing half its square
times ``f``); it converges to the same limit as the step shrinks.
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from impactlab.exceptions import DomainEscapeError
from impactlab.impact_curve import ImpactCurve
from impactlab.io import write_columns
from impactlab.market_model import MarketModel

FloatArray = NDArray[np.float64]
Scheme = Literal["euler", "rebalance"]
ControlSpec = Union[float, ArrayLike]
Feedback = Callable[[int, float, FloatArray, FloatArray, FloatArray], tuple[FloatArray, FloatArray]]


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    steps: int

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")
        if not self.T > self.t0:
            raise ValueError("grid needs T > t0")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.steps

    @property
    def times(self) -> FloatArray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def node_of(self, t: float) -> int:
        k = int(round((t - self.t0) / self.dt))
        if not 0 <= k <= self.steps:
            raise ValueError(f"time {t} is outside the grid [{self.t0}, {self.T}]")
        return k

    def extended(self, extra_steps: int) -> TimeGrid:
        return TimeGrid(self.t0, self.T + extra_steps * self.dt, self.steps + extra_steps)


@dataclass(frozen=True)
class Jump:
    """Block order of ``size`` shares at ``time``.

    ``size`` may be a callable ``size(t, X, Y, V)`` evaluated on the left
    limit of the state, for state-dependent orders such as a final unwind.
    """

    time: float
    size: float | Callable[[float, FloatArray, FloatArray, FloatArray], FloatArray]


@dataclass(frozen=True)
class TradingSignal:
    """Ito strategy ``(a, b)`` on a grid plus a list of block orders.

    ``a`` and ``b`` are scalars, per-step arrays of shape ``(steps,)`` or
    ``(paths, steps)``, or are replaced by a ``feedback(k, t, X, Y, V)``
    callback returning both.  Indices past the end of an array reuse the
    last column, which extends the signal constantly in time.
    """

    y0: float = 0.0
    a: ControlSpec = 0.0
    b: ControlSpec = 0.0
    jumps: tuple[Jump, ...] = ()
    bound: float = math.inf
    feedback: Feedback | None = None

    def __post_init__(self):
        jumps = tuple(j if isinstance(j, Jump) else Jump(*j) for j in self.jumps)
        object.__setattr__(self, "jumps", jumps)
        times = [j.time for j in jumps]
        if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
            raise ValueError("jump times must be sorted")
        if math.isfinite(self.bound):
            if len(jumps) > self.bound:
                raise ValueError(f"{len(jumps)} jumps exceed the bound k={self.bound}")
            for j in jumps:
                if not callable(j.size) and abs(j.size) > self.bound:
                    raise ValueError(f"jump of size {j.size} exceeds the bound k={self.bound}")
            for name in ("a", "b"):
                arr = np.asarray(getattr(self, name), dtype=float)
                if np.any(np.abs(arr) > self.bound):
                    raise ValueError(f"|{name}| exceeds the bound k={self.bound}")

    @property
    def has_jumps(self) -> bool:
        return bool(self.jumps)

    def without_jumps(self) -> TradingSignal:
        return TradingSignal(self.y0, self.a, self.b, (), self.bound, self.feedback)

    def controls(self, k: int, t: float, X, Y, V) -> tuple[FloatArray, FloatArray]:
        if self.feedback is not None:
            return self.feedback(k, t, X, Y, V)
        return _column(self.a, k), _column(self.b, k)


def _column(spec: ControlSpec, k: int):
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        return arr
    idx = min(k, arr.shape[-1] - 1)
    return arr[..., idx]


@dataclass(frozen=True)
class MarketState:
    X: float
    Y: float
    V: float


@dataclass
class PathResult:
    """Simulated states on every grid node (``paths x (steps + 1)``).

    Nodes carrying a block order store the post-trade value; the pre-trade
    left limits are in ``jump_left[node] = (X, Y, V)``.
    """

    grid: TimeGrid
    X: FloatArray
    Y: FloatArray
    V: FloatArray
    dW: FloatArray
    jump_left: dict[int, tuple[FloatArray, FloatArray, FloatArray]] = field(default_factory=dict)
    a: FloatArray | None = None
    b: FloatArray | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    def state(self, node: int, path: int = 0) -> MarketState:
        return MarketState(float(self.X[path, node]), float(self.Y[path, node]), float(self.V[path, node]))

    def terminal(self) -> tuple[FloatArray, FloatArray, FloatArray]:
        return self.X[:, -1], self.Y[:, -1], self.V[:, -1]

    def to_csv(self, path: str | Path, path_index: int = 0, header_comment: str | None = None) -> None:
        """One row per node: ``t, X, Y, V, dW`` (``dW`` is the increment leaving the node)."""
        dW = np.append(self.dW[path_index], np.nan)
        write_columns(
            path,
            {
                "t": self.grid.times,
                "X": self.X[path_index],
                "Y": self.Y[path_index],
                "V": self.V[path_index],
                "dW": dW,
            },
            header_comment=header_comment,
        )


# -- noise ----------------------------------------------------------------------

def path_generator(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based stream for one path: Philox keyed by ``(seed, path)``.

    Draws are sequential in the step index, so the first ``n`` increments of
    a path do not depend on how many are requested in total.
    """
    key = np.array([seed, path_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def brownian_increments(n_paths: int, steps: int, dt: float, seed: int, path_offset: int = 0) -> FloatArray:
    out = np.empty((n_paths, steps))
    scale = math.sqrt(dt)
    for p in range(n_paths):
        out[p] = path_generator(seed, path_offset + p).standard_normal(steps) * scale
    return out


def coarsen(dW: FloatArray, factor: int) -> FloatArray:
    """Sum consecutive blocks of ``factor`` increments (same noise, coarser grid)."""
    paths, steps = dW.shape
    if steps % factor:
        raise ValueError("number of steps must be a multiple of the coarsening factor")
    return dW.reshape(paths, steps // factor, factor).sum(axis=-1)


# -- integration ----------------------------------------------------------------

def _schedule(grid: TimeGrid, jumps: Sequence[Jump]) -> tuple[dict[int, list[Jump]], list[float]]:
    sched: dict[int, list[Jump]] = {}
    snapped = []
    prev: tuple[float, int] | None = None
    for j in jumps:
        node = grid.node_of(j.time)
        if prev is not None and node == prev[1] and j.time != prev[0]:
            raise ValueError(
                f"jumps at t={prev[0]} and t={j.time} snap to the same node; refine the grid"
            )
        sched.setdefault(node, []).append(j)
        snapped.append(grid.times[node])
        prev = (j.time, node)
    return sched, snapped


def check_domain(model: MarketModel, X: FloatArray, k: int) -> None:
    lo, hi = model.price_box
    bad = ~((X >= lo) & (X <= hi))
    if np.any(bad):
        raise DomainEscapeError(f"price left the box [{lo}, {hi}] at step {k}", values=X[bad])


def integrate(
    model: MarketModel,
    signal: TradingSignal,
    grid: TimeGrid,
    dW: FloatArray,
    x0: ArrayLike,
    v0: ArrayLike = 0.0,
    *,
    scheme: Scheme = "euler",
    curve: ImpactCurve | None = None,
    record: bool = True,
    ramps: Sequence[tuple[float, float, float]] = (),
) -> PathResult:
    """Integrate the dynamics on ``grid`` with the given Brownian increments.

    ``ramps`` holds ``(start, duration, size)`` triples of deterministic
    continuous trading at rate ``size/duration`` superposed on the signal
    (used by the order-splitting dynamics).  Each step first moves the state
    with the signal and the noise, then buys that step's ramp increment
    through the jump map, which integrates the deterministic part exactly.
    """
    if scheme not in ("euler", "rebalance"):
        raise ValueError(f"unknown scheme {scheme!r}")
    n_paths, steps = dW.shape
    if steps != grid.steps:
        raise ValueError(f"dW has {steps} steps, grid has {grid.steps}")
    curve = curve or model.curve()
    f, mu, sigma = model.impact, model.mu, model.sigma
    dt = grid.dt
    times = grid.times
    sched, snapped = _schedule(grid, signal.jumps)

    X = np.broadcast_to(np.asarray(x0, dtype=float), (n_paths,)).copy()
    Y = np.broadcast_to(np.asarray(signal.y0, dtype=float), (n_paths,)).copy()
    V = np.broadcast_to(np.asarray(v0, dtype=float), (n_paths,)).copy()
    check_domain(model, X, 0)

    cols = steps + 1 if record else 1
    Xs, Ys, Vs = (np.empty((n_paths, cols)) for _ in range(3))
    As, Bs = (np.empty((n_paths, steps)) for _ in range(2)) if record else (None, None)
    jump_left: dict[int, tuple[FloatArray, FloatArray, FloatArray]] = {}
    max_abs_y = np.abs(Y).max()

    ramp_info = [(s, d, z) for s, d, z in ramps if z != 0.0]

    def ramp_pos(t: float) -> float:
        return sum(z * min(max(t - s, 0.0), d) / d for s, d, z in ramp_info)

    for k in range(steps + 1):
        t = times[k]
        for j in sched.get(k, ()):
            if k not in jump_left:
                jump_left[k] = (X.copy(), Y.copy(), V.copy())
            size = j.size(t, X, Y, V) if callable(j.size) else j.size
            size = np.broadcast_to(np.asarray(size, dtype=float), X.shape)
            X, Y, V = curve.round_trip_state(X, Y, V, size)
            check_domain(model, X, k)
        max_abs_y = max(max_abs_y, float(np.abs(Y).max()))
        if record:
            Xs[:, k], Ys[:, k], Vs[:, k] = X, Y, V
        if k == steps:
            break

        a, b = signal.controls(k, t, X, Y, V)
        a = np.broadcast_to(np.asarray(a, dtype=float), X.shape)
        b = np.broadcast_to(np.asarray(b, dtype=float), X.shape)
        if record:
            As[:, k], Bs[:, k] = a, b
        w = dW[:, k]
        mx, sx = mu(X), sigma(X)
        if ramp_info:
            r0, r1 = ramp_pos(t), ramp_pos(times[k + 1])
            dR = r1 - r0
        else:
            dR = 0.0

        if scheme == "euler":
            fx = f(X)
            dY = b * dt + a * w
            dX = mx * dt + sx * w + fx * dY + a * sx * f.prime(X) * dt
            V = V + (Y * dX + 0.5 * a * a * fx * dt)
            X = X + dX
            Y = Y + dY
        else:
            Xm = X + (mx * dt + sx * w)
            V = V + Y * (Xm - X)
            d = b * dt + a * w
            fm = f(Xm)
            V = V + (Y * d * fm + 0.5 * d * d * fm)
            X = Xm + d * fm
            Y = Y + d
        if dR != 0.0:
            X, Y, V = curve.round_trip_state(X, Y, V, np.full(X.shape, dR))
        check_domain(model, X, k + 1)

    if not record:
        Xs[:, 0], Ys[:, 0], Vs[:, 0] = X, Y, V

    meta: dict[str, Any] = {"scheme": scheme, "jump_times_snapped": snapped}
    if math.isfinite(signal.bound) and max_abs_y > signal.bound:
        meta["admissibility_warning"] = f"max |Y| = {max_abs_y:.4g} exceeds bound k = {signal.bound}"
        warnings.warn(meta["admissibility_warning"], RuntimeWarning, stacklevel=2)
    return PathResult(grid, Xs, Ys, Vs, dW, jump_left, As, Bs, meta)


def _noise(grid: TimeGrid, seed: int | None, paths: int, dW: FloatArray | None, path_offset: int) -> FloatArray:
    if dW is not None:
        return np.atleast_2d(np.asarray(dW, dtype=float))
    if seed is None:
        raise ValueError("either a seed or explicit Brownian increments are required")
    return brownian_increments(paths, grid.steps, grid.dt, seed, path_offset)


def simulate_continuous(
    model: MarketModel,
    signal: TradingSignal,
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
    """Continuous trading without block orders; deterministic given the seed.

    Pass ``dW`` to drive several simulations with the same noise.
    """
    if signal.has_jumps:
        raise ValueError("simulate_continuous takes a signal without jumps; use simulate_with_jumps")
    noise = _noise(grid, seed, paths, dW, path_offset)
    return integrate(model, signal, grid, noise, x0, v0, scheme=scheme, curve=curve, record=record)


def simulate_with_jumps(
    model: MarketModel,
    signal: TradingSignal,
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
    """Continuous trading plus block orders snapped to the nearest grid node."""
    noise = _noise(grid, seed, paths, dW, path_offset)
    return integrate(model, signal, grid, noise, x0, v0, scheme=scheme, curve=curve, record=record)
