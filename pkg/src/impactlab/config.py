"""Experiment configuration: JSON schema and validation.

The schema is generated from the registries so that every name a config may
use is exactly a registered one.  ``docs/config_schema.json`` is a rendered
copy kept in sync by the test suite.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import jsonschema

from impactlab.exceptions import ConfigError
from impactlab.impact_curve import IMPACT_REGISTRY
from impactlab.market_model import CLAIM_REGISTRY, COEFFICIENT_REGISTRY

EXPERIMENTS = (
    "curve-check",
    "discrete-convergence",
    "split-convergence",
    "price",
    "hedge",
    "cancellation-check",
)

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}


def _strict(properties: dict[str, Any], required: tuple[str, ...] = ()) -> dict[str, Any]:
    out = {"type": "object", "additionalProperties": False, "properties": properties}
    if required:
        out["required"] = list(required)
    return out


def _named(registry: dict) -> dict[str, Any]:
    return _strict(
        {"name": {"enum": sorted(registry)}, "params": {"type": "object", "additionalProperties": _NUM}},
        ("name",),
    )


_BOX = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

_SIGNAL = _strict(
    {
        "y0": _NUM,
        "a": _NUM,
        "b": _NUM,
        "bound": _POS,
        "jumps": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
    }
)

_PDE = _strict(
    {
        "space_steps": {"type": "integer", "minimum": 4},
        "time_steps": _POS_INT,
        "box": _BOX,
        "theta": {"type": "number", "minimum": 0.5, "maximum": 1},
        "rannacher_steps": {"type": "integer", "minimum": 0},
        "picard_tol": _POS,
        "picard_max_iter": _POS_INT,
        "k_bound": _POS,
    }
)

_PARAMS = {
    "curve-check": _strict(
        {
            "samples": _POS_INT,
            "x_range": _BOX,
            "order_range": _POS,
            "ode_step": _POS,
            "tolerance": _POS,
            "round_trip_tolerance": _POS,
        }
    ),
    "discrete-convergence": _strict(
        {
            "n_list": {"type": "array", "items": _POS_INT, "minItems": 2},
            "mc_paths": _POS_INT,
            "base_grid_steps": _POS_INT,
            "batch_size": _POS_INT,
            "x0": _NUM,
            "signal": _SIGNAL,
        }
    ),
    "split-convergence": _strict(
        {
            "epsilon_list": {"type": "array", "items": _POS, "minItems": 2},
            "mc_paths": _POS_INT,
            "steps_per_epsilon": {"type": "integer", "minimum": 32},
            "batch_size": _POS_INT,
            "x0": _NUM,
            "signal": _SIGNAL,
        }
    ),
    "price": _strict(
        {
            "pde": _PDE,
            "solver": {"enum": ["direct", "transformed"]},
            "rho": _POS,
        }
    ),
}
_HEDGE = _strict(
    {
        "pde": _PDE,
        "steps": _POS_INT,
        "mc_paths": _POS_INT,
        "batch_size": _POS_INT,
        "x0": _NUM,
        "wealth_shift": _NUM,
        "scheme": {"enum": ["euler", "rebalance"]},
        "control_cap": _POS,
    }
)
_PARAMS["hedge"] = _HEDGE
_PARAMS["cancellation-check"] = _HEDGE

_MODEL = _strict(
    {
        "impact": _named(IMPACT_REGISTRY),
        "coefficients": _named(COEFFICIENT_REGISTRY),
        "claim": _named(CLAIM_REGISTRY),
        "price_box": _BOX,
        "horizon": _POS,
        "strict": {"type": "boolean"},
    },
    ("impact", "coefficients", "claim", "price_box", "horizon"),
)


def config_schema() -> dict[str, Any]:
    schema = _strict(
        {
            "experiment": {"enum": list(EXPERIMENTS)},
            "seed": {"type": "integer", "minimum": 0},
            "model": _MODEL,
            "params": {"type": "object"},
            "output": {"type": "string"},
            "description": {"type": "string"},
        },
        ("experiment", "seed", "model"),
    )
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["title"] = "impactlab experiment"
    schema["allOf"] = [
        {
            "if": {"properties": {"experiment": {"const": kind}}, "required": ["experiment"]},
            "then": {"properties": {"params": _PARAMS[kind]}},
        }
        for kind in EXPERIMENTS
    ]
    return schema


def _describe(err: jsonschema.ValidationError) -> dict[str, Any]:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    out: dict[str, Any] = {"path": where, "message": err.message}
    if err.validator == "required":
        present = err.instance if isinstance(err.instance, dict) else {}
        out["missing"] = [k for k in err.validator_value if k not in present]
    if err.validator == "additionalProperties":
        allowed = set(err.schema.get("properties", {}))
        out["unknown"] = sorted(k for k in err.instance if k not in allowed)
    return out


def validate_config(config: Any) -> dict[str, Any]:
    """Raise :class:`ConfigError` listing every schema violation."""
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        details = [_describe(e) for e in errors]
        err = ConfigError("; ".join(f"{d['path']}: {d['message']}" for d in details))
        err.details = details
        raise err
    return config


def load_config(path: str | Path) -> dict[str, Any]:
    text = Path(path).read_text()
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        err = ConfigError(f"invalid JSON: {exc}")
        err.details = [{"path": "<root>", "message": str(exc)}]
        raise err from None
    return validate_config(config)
