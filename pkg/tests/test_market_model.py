import numpy as np
import pytest

from impactlab.exceptions import ModelValidationError
from impactlab.impact_curve import ImpactFunction, constant_impact, sinusoidal_impact
from impactlab.market_model import (
    CLAIM_REGISTRY,
    COEFFICIENT_REGISTRY,
    Claim,
    MarketModel,
    build_model,
    constant_coefficients,
    constant_delivery_claim,
    cosine_claim,
    make_claim,
    smooth_physical_call_claim,
    tanh_coefficients,
    validate,
    with_claim,
)


def test_constant_model_passes_every_check():
    m = MarketModel(constant_coefficients(0.0, 0.2), constant_impact(0.5), cosine_claim(), (50.0, 150.0), 1.0)
    report = validate(m)
    assert report.ok, report.to_dict()


def test_identity_impact_fails_positivity_at_nonpositive_prices():
    f = ImpactFunction(f=lambda x: x, df=lambda x: np.ones_like(x), d2f=lambda x: np.zeros_like(x))
    with pytest.raises(ModelValidationError, match="f_positive"):
        MarketModel(constant_coefficients(), f, cosine_claim(), (-1.0, 1.0), 1.0)
    report = validate(MarketModel(constant_coefficients(), f, cosine_claim(), (-1.0, 1.0), 1.0, strict=False))
    check = report["f_positive"]
    assert not check.passed and check.witness <= 0


def test_sinusoidal_impact_with_tanh_volatility_passes():
    m = MarketModel(tanh_coefficients(0.0, 0.2, 0.05), sinusoidal_impact(0.5, 0.25), cosine_claim(), (-10.0, 10.0), 1.0)
    report = validate(m)
    assert report.ok
    for name in ("mu_lipschitz", "sigma_lipschitz"):
        assert report[name].passed


def test_zero_volatility_needs_non_strict_model():
    with pytest.raises(ModelValidationError, match="sigma_floor"):
        MarketModel(constant_coefficients(0.0, 0.0), constant_impact(), cosine_claim(), (-1.0, 1.0), 1.0)
    m = MarketModel(constant_coefficients(0.0, 0.0), constant_impact(), cosine_claim(), (-1.0, 1.0), 1.0, strict=False)
    assert m.sigma(np.array([0.3]))[0] == 0.0


def test_declared_lower_bound_is_checked():
    f = ImpactFunction(f=lambda x: 0.1 + 0.0 * x, lower_bound=0.2)
    report = validate(MarketModel(constant_coefficients(), f, cosine_claim(), (0.0, 1.0), 1.0, strict=False))
    assert not report["f_lower_bound"].passed


def test_mislabelled_delivery_is_flagged():
    claim = Claim(g0=np.cos, g1=lambda x: np.ones_like(x), g1_kind="zero")
    report = validate(MarketModel(constant_coefficients(), constant_impact(), claim, (0.0, 1.0), 1.0, strict=False))
    assert not report["g1_zero"].passed


def test_discontinuous_payoff_is_flagged():
    claim = Claim(g0=lambda x: 1e6 * (x > 0.5))
    report = validate(MarketModel(constant_coefficients(), constant_impact(), claim, (0.0, 1.0), 1.0, strict=False))
    assert not report["g0_continuous"].passed


def test_degenerate_box_and_horizon_rejected():
    with pytest.raises(ModelValidationError):
        MarketModel(constant_coefficients(), constant_impact(), cosine_claim(), (1.0, 1.0), 1.0)
    with pytest.raises(ModelValidationError):
        MarketModel(constant_coefficients(), constant_impact(), cosine_claim(), (0.0, 1.0), 0.0)


def test_delivery_kinds():
    assert cosine_claim().delivery == 0.0
    assert constant_delivery_claim(0.7).delivery == 0.7
    assert constant_delivery_claim(0.0).g1_kind == "zero"
    assert smooth_physical_call_claim().delivery is None


@pytest.mark.parametrize("name", sorted(CLAIM_REGISTRY))
def test_every_registered_claim_validates(name):
    m = MarketModel(constant_coefficients(), constant_impact(), make_claim(name), (-5.0, 5.0), 1.0)
    assert not validate(m).hard_failures


@pytest.mark.parametrize("name", sorted(COEFFICIENT_REGISTRY))
def test_every_registered_coefficient_family_validates(name):
    m = MarketModel(COEFFICIENT_REGISTRY[name](), constant_impact(), cosine_claim(), (-5.0, 5.0), 1.0)
    assert validate(m).ok


def test_build_model_from_mapping():
    m = build_model(
        {
            "impact": {"name": "sinusoidal-perturbed", "params": {"amp": 0.1}},
            "coefficients": {"name": "constant", "params": {"sigma": 0.3}},
            "claim": {"name": "cosine"},
            "price_box": [-4, 4],
            "horizon": 2,
        }
    )
    assert m.horizon == 2.0 and m.price_box == (-4.0, 4.0)
    assert m.sigma(np.array([1.0]))[0] == 0.3
    assert m.impact.params["amp"] == 0.1
    with pytest.raises(KeyError):
        build_model({"impact": {"name": "nope"}, "coefficients": {"name": "constant"}, "claim": {"name": "cosine"}, "price_box": [0, 1], "horizon": 1})


def test_with_claim_swaps_only_the_claim(heat_model):
    m = with_claim(heat_model, constant_delivery_claim(0.3))
    assert m.claim.delivery == 0.3
    assert m.impact is heat_model.impact and m.price_box == heat_model.price_box


def test_coefficients_are_vectorised():
    c = tanh_coefficients()
    assert c.sigma(0.0).shape == ()
    assert c.sigma(np.zeros((2, 3))).shape == (2, 3)
