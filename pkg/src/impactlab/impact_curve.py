"""Impact curve: the price flow generated by feeding an order through the book.

Buying an infinitesimal ``d`` shares at price ``x`` moves the price by
``d * f(x)``.  Integrating this rule over an order of total size ``delta``
gives the autonomous ODE ``x'(s) = f(x(s))`` in the size variable ``s``,
whose terminal value is :meth:`ImpactCurve.flow`.  The cost functional
``I(x, z) = int_0^z s f(x(x, s)) ds`` is the extra cash paid versus the
pre-trade marked value.

All operations are vectorised over numpy broadcasting and are pure, so an
:class:`ImpactCurve` can be shared between workers.
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from impactlab.exceptions import ConvergenceError, DomainEscapeError

FloatArray = NDArray[np.float64]

_FD_STEP = 1e-5
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


class AccuracyWarning(UserWarning):
    """Richardson estimate of the RK4 flow error exceeds the configured bound."""


def _as_float(x: ArrayLike) -> FloatArray:
    return np.asarray(x, dtype=np.float64)


def _maybe_scalar(out: FloatArray, *inputs: ArrayLike):
    if all(np.ndim(v) == 0 for v in inputs):
        return float(out)
    return out


@dataclass(frozen=True)
class ImpactFunction:
    """Impact slope ``f`` (currency per share) as a function of price.

    ``df`` and ``d2f`` are optional; when missing, central differences with
    step ``1e-5`` are used and :attr:`numeric_derivatives` is ``True`` so the
    fact can be reported in experiment metadata.
    """

    f: Callable[[FloatArray], FloatArray]
    df: Callable[[FloatArray], FloatArray] | None = None
    d2f: Callable[[FloatArray], FloatArray] | None = None
    lower_bound: float | None = None
    name: str = "custom"
    params: dict[str, Any] = field(default_factory=dict)
    constant_value: float | None = None

    def __post_init__(self):
        if self.lower_bound is not None and not self.lower_bound > 0:
            raise ValueError("declared lower bound of f must be strictly positive")

    @property
    def numeric_derivatives(self) -> bool:
        return self.df is None or self.d2f is None

    def __call__(self, x: ArrayLike) -> FloatArray:
        x = _as_float(x)
        return np.broadcast_to(_as_float(self.f(x)), x.shape).astype(np.float64, copy=False)

    def prime(self, x: ArrayLike) -> FloatArray:
        x = _as_float(x)
        if self.df is not None:
            return np.broadcast_to(_as_float(self.df(x)), x.shape).astype(np.float64, copy=False)
        return (self(x + _FD_STEP) - self(x - _FD_STEP)) / (2 * _FD_STEP)

    def second(self, x: ArrayLike) -> FloatArray:
        x = _as_float(x)
        if self.d2f is not None:
            return np.broadcast_to(_as_float(self.d2f(x)), x.shape).astype(np.float64, copy=False)
        if self.df is not None:
            return (self.prime(x + _FD_STEP) - self.prime(x - _FD_STEP)) / (2 * _FD_STEP)
        return (self(x + _FD_STEP) - 2 * self(x) + self(x - _FD_STEP)) / _FD_STEP**2

    def sample_bounds(self, box: tuple[float, float], samples: int = 10_000) -> dict[str, float]:
        """Sampled extrema of ``f``, ``|f'|`` and ``|f''|`` on a price box."""
        xs = np.linspace(box[0], box[1], samples)
        fx = self(xs)
        return {
            "f_min": float(fx.min()),
            "f_max": float(fx.max()),
            "argmin": float(xs[np.argmin(fx)]),
            "df_max": float(np.abs(self.prime(xs)).max()),
            "d2f_max": float(np.abs(self.second(xs)).max()),
        }


# -- registry -----------------------------------------------------------------

def constant_impact(lam: float = 0.5) -> ImpactFunction:
    """Fixed impact ``f = lam``: the flow is ``x + y*lam``."""
    lam = float(lam)
    return ImpactFunction(
        f=lambda x: np.full(np.shape(x), lam),
        df=lambda x: np.zeros(np.shape(x)),
        d2f=lambda x: np.zeros(np.shape(x)),
        lower_bound=lam if lam > 0 else None,
        name="constant",
        params={"lam": lam},
        constant_value=lam,
    )


def affine_bounded_impact(
    base: float = 0.5, slope: float = 0.1, scale: float = 2.0, center: float = 0.0
) -> ImpactFunction:
    """``f(x) = base + slope*scale*tanh((x - center)/scale)``.

    Affine with slope ``slope`` near ``center``, saturating to
    ``base +/- slope*scale`` far away, so ``f`` stays in ``C^2_b``.
    """
    base, slope, scale, center = map(float, (base, slope, scale, center))
    amp = slope * scale

    def f(x):
        return base + amp * np.tanh((x - center) / scale)

    def df(x):
        return slope / np.cosh((x - center) / scale) ** 2

    def d2f(x):
        u = (x - center) / scale
        return -2.0 * slope / scale * np.tanh(u) / np.cosh(u) ** 2

    lb = base - abs(amp)
    return ImpactFunction(
        f=f,
        df=df,
        d2f=d2f,
        lower_bound=lb if lb > 0 else None,
        name="affine-bounded",
        params={"base": base, "slope": slope, "scale": scale, "center": center},
    )


def sinusoidal_impact(
    base: float = 0.5, amp: float = 0.25, freq: float = 1.0, phase: float = 0.0
) -> ImpactFunction:
    """``f(x) = base + amp*sin(freq*x + phase)``."""
    base, amp, freq, phase = map(float, (base, amp, freq, phase))
    lb = base - abs(amp)
    return ImpactFunction(
        f=lambda x: base + amp * np.sin(freq * x + phase),
        df=lambda x: amp * freq * np.cos(freq * x + phase),
        d2f=lambda x: -amp * freq**2 * np.sin(freq * x + phase),
        lower_bound=lb if lb > 0 else None,
        name="sinusoidal-perturbed",
        params={"base": base, "amp": amp, "freq": freq, "phase": phase},
    )


IMPACT_REGISTRY: dict[str, Callable[..., ImpactFunction]] = {
    "constant": constant_impact,
    "affine-bounded": affine_bounded_impact,
    "sinusoidal-perturbed": sinusoidal_impact,
}


def make_impact(name: str, **params) -> ImpactFunction:
    try:
        factory = IMPACT_REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown impact function {name!r}; known: {sorted(IMPACT_REGISTRY)}") from None
    return factory(**params)


# -- curve ----------------------------------------------------------------------

@dataclass(frozen=True)
class ImpactCurve:
    """Flow, price move, cost and inverse of the impact rule on a price box.

    Parameters
    ----------
    impact:
        The impact slope ``f``.
    price_box:
        Working domain ``[lo, hi]``.  Trajectories are monotone in the order
        size, so checking both end points is enough to detect escapes.
    ode_step:
        RK4 step in share units.  Each element uses its own even number of
        steps ``n = 2*ceil(|delta|/(2*ode_step))`` so results never depend on
        what else is in the batch.
    newton_tol:
        Target accuracy (price units) of :meth:`inverse_flow`.
    """

    impact: ImpactFunction
    price_box: tuple[float, float] = (-math.inf, math.inf)
    ode_step: float = 1e-3
    newton_tol: float = 1e-10
    max_iter: int = 100
    richardson_tol: float = 1e-9

    def __post_init__(self):
        if not self.ode_step > 0:
            raise ValueError("ode_step must be positive")
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        lo, hi = self.price_box
        if not lo < hi:
            raise ValueError("price box must be non-degenerate")

    # -- internals -----------------------------------------------------------

    def _check_box(self, *arrays: FloatArray, what: str = "price") -> None:
        lo, hi = self.price_box
        for a in arrays:
            bad = ~((a >= lo) & (a <= hi))
            if np.any(bad):
                raise DomainEscapeError(
                    f"{what} left the working box [{lo}, {hi}]", values=np.asarray(a)[bad]
                )

    def _steps(self, delta: FloatArray, step: float) -> NDArray[np.int64]:
        n = 2 * np.ceil(np.abs(delta) / (2 * step)).astype(np.int64)
        return np.maximum(n, 2)

    def _march(
        self, x: FloatArray, delta: FloatArray, *, with_cost: bool = False, step: float | None = None
    ) -> tuple[FloatArray, FloatArray | None]:
        """RK4 along ``x' = f(x)`` for size ``delta``; Simpson on the same nodes."""
        f = self.impact
        x, delta = np.broadcast_arrays(_as_float(x), _as_float(delta))
        lam = f.constant_value
        if lam is not None:
            # RK4 and Simpson are exact here; skip the loop
            return x + lam * delta, (0.5 * lam * delta * delta if with_cost else None)
        n = self._steps(delta, self.ode_step if step is None else step)
        h = delta / n
        cur = x.copy()
        acc = np.zeros_like(cur) if with_cost else None
        for k in range(int(n.max()) if n.size else 0):
            active = k < n
            k1 = f(cur)
            if with_cost:
                w = 1.0 if k == 0 else (4.0 if k % 2 else 2.0)
                acc = acc + np.where(active, w * (k * h) * k1, 0.0)
            k2 = f(cur + 0.5 * h * k1)
            k3 = f(cur + 0.5 * h * k2)
            k4 = f(cur + h * k3)
            nxt = cur + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            cur = np.where(active, nxt, cur)
        cost = None
        if with_cost:
            acc = acc + delta * f(cur)
            cost = acc * h / 3.0
        return cur, cost

    # -- public operations ---------------------------------------------------

    def flow(self, x: ArrayLike, delta: ArrayLike):
        """Price reached from ``x`` after an order of ``delta`` shares."""
        xa, da = _as_float(x), _as_float(delta)
        self._check_box(xa)
        out, _ = self._march(xa, da)
        self._check_box(out)
        return _maybe_scalar(out, x, delta)

    def flow_with_error(self, x: ArrayLike, delta: ArrayLike):
        """Flow plus a double-step Richardson error estimate.

        Emits :class:`AccuracyWarning` when the estimate exceeds
        ``richardson_tol``.
        """
        xa, da = _as_float(x), _as_float(delta)
        self._check_box(xa)
        fine, _ = self._march(xa, da)
        coarse, _ = self._march(xa, da, step=2 * self.ode_step)
        self._check_box(fine)
        err = np.abs(fine - coarse) / 15.0
        if np.any(err > self.richardson_tol):
            warnings.warn(
                f"RK4 flow error estimate {float(err.max()):.3g} exceeds {self.richardson_tol:g}; "
                "reduce ode_step",
                AccuracyWarning,
                stacklevel=2,
            )
        return _maybe_scalar(fine, x, delta), _maybe_scalar(err, x, delta)

    def delta_x(self, x: ArrayLike, delta: ArrayLike):
        """Price move ``flow(x, delta) - x``; has the sign of ``delta``."""
        xa = _as_float(x)
        return _maybe_scalar(_as_float(self.flow(x, delta)) - xa, x, delta)

    def cost(self, x: ArrayLike, z: ArrayLike):
        """Liquidity cost ``I(x, z) = int_0^z s f(flow(x, s)) ds`` (always >= 0)."""
        xa, za = _as_float(x), _as_float(z)
        self._check_box(xa)
        end, c = self._march(xa, za, with_cost=True)
        self._check_box(end)
        return _maybe_scalar(c, x, z)

    def flow_and_cost(self, x: ArrayLike, delta: ArrayLike) -> tuple[FloatArray, FloatArray]:
        xa, da = _as_float(x), _as_float(delta)
        self._check_box(xa)
        end, c = self._march(xa, da, with_cost=True)
        self._check_box(end)
        return end, c

    def inverse_flow(self, x: ArrayLike, target: ArrayLike):
        """Order size ``y`` with ``flow(x, y) = target``.

        Safeguarded Newton on the analytic derivative ``d flow/dy = f(flow)``;
        a step that leaves the current sign bracket is replaced by bisection.
        """
        xa, ta = np.broadcast_arrays(_as_float(x), _as_float(target))
        self._check_box(xa)
        self._check_box(ta, what="target price")
        f = self.impact
        y = (ta - xa) / f(xa)
        lo = np.full(y.shape, -np.inf)
        hi = np.full(y.shape, np.inf)
        done = np.zeros(y.shape, dtype=bool)
        for _ in range(self.max_iter):
            reached, _ = self._march(xa, y)
            r = reached - ta
            done = np.abs(r) <= self.newton_tol
            if done.all():
                return _maybe_scalar(y, x, target)
            lo = np.where(r < 0, np.maximum(lo, y), lo)
            hi = np.where(r > 0, np.minimum(hi, y), hi)
            trial = y - r / f(reached)
            inside = (trial > lo) & (trial < hi)
            bracketed = np.isfinite(lo) & np.isfinite(hi)
            trial = np.where(inside | ~bracketed, trial, 0.5 * (lo + hi))
            y = np.where(done, y, trial)
        raise ConvergenceError(
            f"inverse_flow did not reach tol {self.newton_tol:g} in {self.max_iter} iterations",
            nodes=np.flatnonzero(~done),
        )

    def inverse_flow_quadrature(self, x: ArrayLike, target: ArrayLike):
        """Same map as :meth:`inverse_flow`, via ``int_x^target ds / f(s)``.

        The flow is autonomous, so the order size joining two prices is the
        integral of ``1/f`` between them.  Composite 24-point Gauss-Legendre
        on panels of unit width; used in hot loops (PDE coefficients).
        """
        xa, ta = np.broadcast_arrays(_as_float(x), _as_float(target))
        width = ta - xa
        panels = max(1, int(np.ceil(np.abs(width).max(initial=0.0))))
        total = np.zeros(xa.shape)
        for j in range(panels):
            a = xa + width * (j / panels)
            half = 0.5 * width / panels
            mid = a + half
            nodes = mid[..., None] + half[..., None] * _GL_NODES
            total = total + half * np.sum(_GL_WEIGHTS / self.impact(nodes), axis=-1)
        return _maybe_scalar(total, x, target)

    def round_trip_state(self, x: ArrayLike, y: ArrayLike, v: ArrayLike, delta: ArrayLike):
        """Jump map of a block order ``delta`` on the state ``(x, y, v)``.

        Returns ``(flow(x, delta), y + delta, v + y*dx(x, delta) + I(x, delta))``.
        Applying ``delta`` then ``-delta`` restores the state.
        """
        xa, ya, va, da = np.broadcast_arrays(*(_as_float(a) for a in (x, y, v, delta)))
        end, c = self.flow_and_cost(xa, da)
        out = (end, ya + da, va + ya * (end - xa) + c)
        if all(np.ndim(a) == 0 for a in (x, y, v, delta)):
            return tuple(float(o) for o in out)
        return out

    # -- derivatives via the flow identities ------------------------------------

    def dflow_dx(self, x: ArrayLike, y: ArrayLike, *, reached: ArrayLike | None = None) -> FloatArray:
        """``d flow/dx = f(flow(x, y)) / f(x)``."""
        x = _as_float(x)
        reached = self._march(x, _as_float(y))[0] if reached is None else _as_float(reached)
        return self.impact(reached) / self.impact(x)

    def d2flow_dx2(self, x: ArrayLike, y: ArrayLike, *, reached: ArrayLike | None = None) -> FloatArray:
        """``d^2 flow/dx^2 = f(X) (f'(X) - f'(x)) / f(x)^2`` with ``X = flow(x, y)``."""
        f = self.impact
        x = _as_float(x)
        X = self._march(x, _as_float(y))[0] if reached is None else _as_float(reached)
        return f(X) * (f.prime(X) - f.prime(x)) / f(x) ** 2

    def dcost_dx(self, x: ArrayLike, y: ArrayLike, *, reached: ArrayLike | None = None) -> FloatArray:
        """``d I/dx = (y f(X) - (X - x)) / f(x)``."""
        f = self.impact
        x, y = _as_float(x), _as_float(y)
        X = self._march(x, y)[0] if reached is None else _as_float(reached)
        return (y * f(X) - (X - x)) / f(x)

    def d2cost_dx2(self, x: ArrayLike, y: ArrayLike, *, reached: ArrayLike | None = None) -> FloatArray:
        """Second ``x``-derivative of the cost at fixed order size."""
        f = self.impact
        x, y = _as_float(x), _as_float(y)
        X = self._march(x, y)[0] if reached is None else _as_float(reached)
        fx, fX = f(x), f(X)
        ratio = fX / fx
        return (y * f.prime(X) * ratio - ratio + 1.0) / fx - (y * fX - (X - x)) * f.prime(x) / fx**2


def _fd(fn: Callable[[FloatArray], FloatArray], at: FloatArray, h: float) -> FloatArray:
    """Fourth-order central difference."""
    return (8.0 * (fn(at + h) - fn(at - h)) - (fn(at + 2 * h) - fn(at - 2 * h))) / (12.0 * h)


def identity_residuals(
    curve: ImpactCurve, x: ArrayLike, y: ArrayLike, iota: ArrayLike, h: float = 1e-3
) -> dict[str, FloatArray]:
    """Residuals of the flow/cost identities at sampled ``(x, y, iota)``.

    ``composition``: ``flow(flow(x, i), -y - i) - flow(x, -y)``;
    ``dflow_dy`` / ``dflow_dx``: finite-difference derivatives against
    ``f(flow(x, y))`` (the latter scaled by ``f(x)``);
    ``cost_shift``: the cost of the shifted round trip minus
    ``y dx(x, i) + I(x, i)``;
    ``dcost_dy`` / ``dcost_dx``: derivatives of the cost against ``y f(flow)``.
    """
    f = curve.impact
    x, y, iota = np.broadcast_arrays(_as_float(x), _as_float(y), _as_float(iota))
    X = curve.flow(x, y)
    target = f(X)
    out: dict[str, FloatArray] = {}
    out["composition"] = curve.flow(curve.flow(x, iota), -y - iota) - curve.flow(x, -y)
    out["dflow_dy"] = _fd(lambda s: curve.flow(x, s), y, h) - target
    out["dflow_dx"] = f(x) * _fd(lambda s: curve.flow(s, y), x, h) - target
    lhs = curve.cost(curve.flow(curve.flow(x, iota), -y - iota), y + iota) - curve.cost(curve.flow(x, -y), y)
    out["cost_shift"] = lhs - (y * curve.delta_x(x, iota) + curve.cost(x, iota))
    out["dcost_dy"] = _fd(lambda s: curve.cost(x, s), y, h) - y * target
    out["dcost_dx"] = f(x) * _fd(lambda s: curve.cost(s, y), x, h) + (X - x) - y * target
    return out
