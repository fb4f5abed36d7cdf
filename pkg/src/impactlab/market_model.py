"""Market model: diffusion coefficients, impact function, claim, and checks.

Assumptions are verified numerically by dense sampling on the price box.
Hard failures (``f <= 0`` or ``sigma`` below its floor) make strict model
construction raise; everything else is reported.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from numpy.typing import NDArray

from impactlab.exceptions import ModelValidationError
from impactlab.impact_curve import ImpactCurve, ImpactFunction, make_impact

FloatArray = NDArray[np.float64]
Fn = Callable[[FloatArray], FloatArray]


def _vec(fn: Fn) -> Fn:
    def wrapped(x):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(np.asarray(fn(x), dtype=np.float64), x.shape).astype(np.float64, copy=False)

    wrapped.__doc__ = fn.__doc__
    return wrapped


@dataclass(frozen=True)
class DiffusionCoefficients:
    """Drift ``mu`` and volatility ``sigma`` of the price between trades."""

    mu: Fn
    sigma: Fn
    lipschitz_bound: float = 10.0
    sigma_floor: float = 1e-3
    name: str = "custom"
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "mu", _vec(self.mu))
        object.__setattr__(self, "sigma", _vec(self.sigma))


@dataclass(frozen=True)
class Claim:
    """European claim: cash part ``g0`` and delivered shares ``g1``."""

    g0: Fn
    g1: Fn = lambda x: np.zeros(np.shape(x))
    g1_kind: Literal["zero", "constant", "general"] = "zero"
    name: str = "custom"
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "g0", _vec(self.g0))
        object.__setattr__(self, "g1", _vec(self.g1))
        if self.g1_kind not in ("zero", "constant", "general"):
            raise ValueError(f"unknown g1_kind {self.g1_kind!r}")

    @property
    def delivery(self) -> float | None:
        """Constant delivered quantity, when ``g1`` is constant (0 for cash claims)."""
        if self.g1_kind == "zero":
            return 0.0
        if self.g1_kind == "constant":
            return float(self.g1(np.zeros(1))[0])
        return None


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    hard: bool
    detail: str
    witness: float | None = None


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def hard_failures(self) -> tuple[CheckResult, ...]:
        return tuple(c for c in self.checks if c.hard and not c.passed)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            c.name: {"passed": c.passed, "hard": c.hard, "detail": c.detail, "witness": c.witness}
            for c in self.checks
        }


@dataclass(frozen=True)
class MarketModel:
    """Everything needed to simulate and price on one stock.

    With ``strict=True`` (the default) construction refuses models that fail
    a hard check; degenerate deterministic test models (``sigma = 0``) pass
    ``strict=False``.
    """

    coefficients: DiffusionCoefficients
    impact: ImpactFunction
    claim: Claim
    price_box: tuple[float, float]
    horizon: float
    strict: bool = True
    samples: int = 10_000

    def __post_init__(self):
        lo, hi = self.price_box
        if not lo < hi:
            raise ModelValidationError("price box must be non-degenerate")
        if not self.horizon > 0:
            raise ModelValidationError("horizon T must be positive")
        if self.strict:
            report = validate(self)
            if report.hard_failures:
                msgs = "; ".join(f"{c.name}: {c.detail}" for c in report.hard_failures)
                raise ModelValidationError(msgs)

    @property
    def mu(self) -> Fn:
        return self.coefficients.mu

    @property
    def sigma(self) -> Fn:
        return self.coefficients.sigma

    @property
    def f(self) -> ImpactFunction:
        return self.impact

    def curve(self, ode_step: float = 1e-3, newton_tol: float = 1e-10) -> ImpactCurve:
        return ImpactCurve(self.impact, price_box=self.price_box, ode_step=ode_step, newton_tol=newton_tol)


def _max_slope(fn: Fn, xs: FloatArray) -> tuple[float, float]:
    vals = fn(xs)
    q = np.abs(np.diff(vals) / np.diff(xs))
    i = int(np.argmax(q))
    return float(q[i]), float(xs[i])


def validate(model: MarketModel, samples: int | None = None) -> ValidationReport:
    """Check positivity, bounds and regularity of the model by sampling the price box."""
    n = model.samples if samples is None else samples
    lo, hi = model.price_box
    xs = np.linspace(lo, hi, n)
    f = model.impact
    coef = model.coefficients
    checks: list[CheckResult] = []

    fx = f(xs)
    i = int(np.argmin(fx))
    pos = bool(fx[i] > 0)
    checks.append(CheckResult("f_positive", pos, True, f"min f = {fx[i]:.6g}", None if pos else float(xs[i])))

    if f.lower_bound is not None:
        ok = bool(fx[i] >= f.lower_bound)
        checks.append(
            CheckResult(
                "f_lower_bound",
                ok,
                True,
                f"declared inf f = {f.lower_bound:.6g}, sampled min = {fx[i]:.6g}",
                None if ok else float(xs[i]),
            )
        )

    bounds = f.sample_bounds(model.price_box, n)
    finite = all(np.isfinite(v) for v in bounds.values())
    checks.append(
        CheckResult(
            "f_C2_bounded",
            finite,
            False,
            f"max f = {bounds['f_max']:.4g}, max|f'| = {bounds['df_max']:.4g}, max|f''| = {bounds['d2f_max']:.4g}"
            + (" (numerical derivatives)" if f.numeric_derivatives else ""),
        )
    )

    sig = coef.sigma(xs)
    j = int(np.argmin(sig))
    floor_ok = bool(sig[j] >= coef.sigma_floor)
    checks.append(
        CheckResult(
            "sigma_floor",
            floor_ok,
            True,
            f"min sigma = {sig[j]:.6g}, floor = {coef.sigma_floor:.6g}",
            None if floor_ok else float(xs[j]),
        )
    )

    for label, fn in (("mu", coef.mu), ("sigma", coef.sigma)):
        slope, where = _max_slope(fn, xs)
        ok = slope <= coef.lipschitz_bound
        checks.append(
            CheckResult(
                f"{label}_lipschitz",
                ok,
                False,
                f"sampled Lipschitz constant {slope:.6g} vs bound {coef.lipschitz_bound:.6g}",
                None if ok else where,
            )
        )

    # the flow is invertible in the order size when f > 0 on the box
    checks.append(
        CheckResult("flow_invertible", pos, False, "flow strictly increasing in order size" if pos else "f <= 0 somewhere")
    )

    g0 = model.claim.g0(xs)
    jumps = np.abs(np.diff(g0))
    k = int(np.argmax(jumps))
    dx = xs[1] - xs[0]
    # A continuous g0 has increments shrinking with the sampling step.
    cont_ok = bool(np.all(np.isfinite(g0)) and jumps[k] <= max(1e-6, 1e3 * dx))
    checks.append(
        CheckResult("g0_continuous", cont_ok, False, f"largest sampled increment {jumps[k]:.3g}", None if cont_ok else float(xs[k]))
    )
    if model.claim.g1_kind == "zero":
        g1 = model.claim.g1(xs)
        ok = bool(np.all(g1 == 0))
        checks.append(CheckResult("g1_zero", ok, False, "g1 identically zero" if ok else "g1 tagged zero but nonzero"))

    return ValidationReport(tuple(checks))


# -- coefficient registry ------------------------------------------------------

def constant_coefficients(mu: float = 0.0, sigma: float = 0.2, sigma_floor: float | None = None) -> DiffusionCoefficients:
    mu, sigma = float(mu), float(sigma)
    floor = sigma if sigma_floor is None else float(sigma_floor)
    return DiffusionCoefficients(
        mu=lambda x: np.full(np.shape(x), mu),
        sigma=lambda x: np.full(np.shape(x), sigma),
        lipschitz_bound=1.0,
        sigma_floor=floor if floor > 0 else 1e-3,
        name="constant",
        params={"mu": mu, "sigma": sigma},
    )


def tanh_coefficients(mu: float = 0.0, sigma: float = 0.2, amp: float = 0.05, scale: float = 1.0) -> DiffusionCoefficients:
    """``sigma(x) = sigma + amp*tanh(x/scale)``, constant drift."""
    mu, sigma, amp, scale = map(float, (mu, sigma, amp, scale))
    return DiffusionCoefficients(
        mu=lambda x: np.full(np.shape(x), mu),
        sigma=lambda x: sigma + amp * np.tanh(x / scale),
        lipschitz_bound=abs(amp) / scale * 1.01 + 1e-12,
        sigma_floor=sigma - abs(amp),
        name="tanh-vol",
        params={"mu": mu, "sigma": sigma, "amp": amp, "scale": scale},
    )


def bump_coefficients(mu: float = 0.0, sigma: float = 0.2, amp: float = 0.1, width: float = 1.0) -> DiffusionCoefficients:
    """``sigma(x) = sigma + amp*exp(-x^2/(2 width^2))``: local-vol bump at 0."""
    mu, sigma, amp, width = map(float, (mu, sigma, amp, width))
    lip = abs(amp) / width * np.exp(-0.5) * 1.01 + 1e-12
    return DiffusionCoefficients(
        mu=lambda x: np.full(np.shape(x), mu),
        sigma=lambda x: sigma + amp * np.exp(-0.5 * (x / width) ** 2),
        lipschitz_bound=float(lip),
        sigma_floor=min(sigma, sigma + amp),
        name="bump-vol",
        params={"mu": mu, "sigma": sigma, "amp": amp, "width": width},
    )


COEFFICIENT_REGISTRY: dict[str, Callable[..., DiffusionCoefficients]] = {
    "constant": constant_coefficients,
    "tanh-vol": tanh_coefficients,
    "bump-vol": bump_coefficients,
}


# -- claim registry ------------------------------------------------------------

def _softplus(u):
    return np.logaddexp(0.0, u)


def cosine_claim(amp: float = 1.0, freq: float = 1.0, phase: float = 0.0) -> Claim:
    amp, freq, phase = map(float, (amp, freq, phase))
    return Claim(
        g0=lambda x: amp * np.cos(freq * x + phase),
        name="cosine",
        params={"amp": amp, "freq": freq, "phase": phase},
    )


def call_spread_smoothed_claim(low: float = -0.5, high: float = 0.5, smoothing: float = 0.1) -> Claim:
    """Call spread ``(x-low)^+ - (x-high)^+`` with softplus-smoothed kinks."""
    low, high, eta = float(low), float(high), float(smoothing)
    return Claim(
        g0=lambda x: eta * (_softplus((x - low) / eta) - _softplus((x - high) / eta)),
        name="call-spread-smoothed",
        params={"low": low, "high": high, "smoothing": eta},
    )


def quadratic_capped_claim(scale: float = 1.0, cap: float = 1.0) -> Claim:
    """``cap * tanh(scale * x^2 / cap)``: quadratic near zero, capped at ``cap``."""
    scale, cap = float(scale), float(cap)
    return Claim(
        g0=lambda x: cap * np.tanh(scale * x**2 / cap),
        name="quadratic-capped",
        params={"scale": scale, "cap": cap},
    )


def constant_delivery_claim(quantity: float = 0.5, cash: float = 0.0) -> Claim:
    """Deliver ``quantity`` shares and pay ``cash`` at maturity."""
    q, c = float(quantity), float(cash)
    return Claim(
        g0=lambda x: np.full(np.shape(x), c),
        g1=lambda x: np.full(np.shape(x), q),
        g1_kind="zero" if q == 0 else "constant",
        name="constant-delivery",
        params={"quantity": q, "cash": c},
    )


def smooth_physical_call_claim(strike: float = 0.0, smoothing: float = 0.25, quantity: float = 1.0) -> Claim:
    """Physically settled call: deliver ``q*s(x)`` shares against ``strike`` cash each.

    ``s`` is a logistic step of width ``smoothing``; ``g0 = -strike*g1``.
    """
    k, eta, q = float(strike), float(smoothing), float(quantity)

    def g1(x):
        return q * 0.5 * (1.0 + np.tanh((x - k) / eta))

    return Claim(
        g0=lambda x: -k * g1(x),
        g1=g1,
        g1_kind="general",
        name="smooth-physical-call",
        params={"strike": k, "smoothing": eta, "quantity": q},
    )


def constant_claim(value: float = 1.0) -> Claim:
    value = float(value)
    return Claim(g0=lambda x: np.full(np.shape(x), value), name="constant", params={"value": value})


def affine_claim(intercept: float = 0.0, slope: float = 1.0) -> Claim:
    a, b = float(intercept), float(slope)
    return Claim(g0=lambda x: a + b * x, name="affine", params={"intercept": a, "slope": b})


CLAIM_REGISTRY: dict[str, Callable[..., Claim]] = {
    "cosine": cosine_claim,
    "call-spread-smoothed": call_spread_smoothed_claim,
    "quadratic-capped": quadratic_capped_claim,
    "constant-delivery": constant_delivery_claim,
    "smooth-physical-call": smooth_physical_call_claim,
    "constant": constant_claim,
    "affine": affine_claim,
}


def _lookup(registry: dict, kind: str, name: str):
    try:
        return registry[name]
    except KeyError:
        raise KeyError(f"unknown {kind} {name!r}; known: {sorted(registry)}") from None


def make_coefficients(name: str, **params) -> DiffusionCoefficients:
    return _lookup(COEFFICIENT_REGISTRY, "coefficient family", name)(**params)


def make_claim(name: str, **params) -> Claim:
    return _lookup(CLAIM_REGISTRY, "claim", name)(**params)


def build_model(description: dict[str, Any], *, strict: bool = True) -> MarketModel:
    """Model from a config mapping::

        {"impact": {"name": ..., "params": {...}},
         "coefficients": {"name": ..., "params": {...}},
         "claim": {"name": ..., "params": {...}},
         "price_box": [lo, hi], "horizon": T}
    """
    return MarketModel(
        coefficients=make_coefficients(description["coefficients"]["name"], **description["coefficients"].get("params", {})),
        impact=make_impact(description["impact"]["name"], **description["impact"].get("params", {})),
        claim=make_claim(description["claim"]["name"], **description["claim"].get("params", {})),
        price_box=(float(description["price_box"][0]), float(description["price_box"][1])),
        horizon=float(description["horizon"]),
        strict=strict,
    )


def with_claim(model: MarketModel, claim: Claim) -> MarketModel:
    return MarketModel(
        coefficients=model.coefficients,
        impact=model.impact,
        claim=claim,
        price_box=model.price_box,
        horizon=model.horizon,
        strict=model.strict,
        samples=model.samples,
    )

