"""Exception hierarchy shared by every impactlab module."""

from __future__ import annotations


class ImpactLabError(Exception):
    """Base class for all library errors."""


class DomainEscapeError(ImpactLabError):
    """A price trajectory left the declared working price box."""

    def __init__(self, message: str, values=None):
        super().__init__(message)
        self.values = values


class ConvergenceError(ImpactLabError):
    """An iterative solver (Newton, Picard, fixed point) did not converge."""

    def __init__(self, message: str, nodes=None):
        super().__init__(message)
        self.nodes = [] if nodes is None else list(nodes)


class ModelValidationError(ImpactLabError):
    """A market model violates a hard assumption (f <= 0, sigma below floor)."""


class StabilityError(ImpactLabError):
    """A PDE time step breaks the scheme's stability rule."""


class SeparationError(ImpactLabError):
    """Jump orders are closer together than the splitting window allows."""


class ConfigError(ImpactLabError):
    """An experiment configuration failed schema validation."""
