"""Exception types shared across the package."""

from __future__ import annotations

__all__ = [
    "FracsveError",
    "ConfigError",
    "NumericalError",
    "QuadratureError",
    "FactorizationError",
    "DivergenceError",
    "ResourceLimitError",
]


class FracsveError(Exception):
    """Base class for package-specific failures."""


class ConfigError(FracsveError):
    """Invalid experiment configuration (maps to exit code 2)."""


class NumericalError(FracsveError):
    """Base class for numerical failures (maps to exit code 3)."""


class QuadratureError(NumericalError):
    """Adaptive quadrature did not converge.

    Carries the best available estimate and the integrator's error message
    so callers can decide whether the partial result is usable.
    """

    def __init__(self, message: str, estimate: float | None = None):
        super().__init__(message)
        self.estimate = estimate


class FactorizationError(NumericalError):
    """Covariance factorization broke down at every regularization level."""

    def __init__(self, message: str, pivot_index: int | None = None,
                 jitters_tried: tuple[float, ...] = ()):
        super().__init__(message)
        self.pivot_index = pivot_index
        self.jitters_tried = jitters_tried


class DivergenceError(NumericalError):
    """A simulated path left the admissible range (|state| too large)."""

    def __init__(self, message: str, step: int | None = None,
                 replication: int | None = None):
        super().__init__(message)
        self.step = step
        self.replication = replication


class ResourceLimitError(FracsveError):
    """Requested grid or ensemble exceeds the configured resource limits."""
