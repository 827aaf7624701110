"""Coefficient models for the d-dimensional equations, and a small registry.

A model supplies drift b, diffusion sigma, and their Jacobians as vectorized
callables: for state arrays of shape (..., d) they return (..., d),
(..., d, m), (..., d, d) and (..., d, m, d) respectively, with
grad_b[..., i, k] = d b_i / d x_k and grad_sigma[..., i, j, k] =
d sigma_ij / d x_k.  All built-ins have bounded, uniformly continuous
derivatives, which is the standing assumption of the error analysis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["Model", "get_model", "model_table", "check_gradients", "MODEL_NAMES"]


@dataclass(frozen=True)
class Model:
    name: str
    d: int
    m: int
    X0: np.ndarray
    b: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    grad_b: Callable[[np.ndarray], np.ndarray]
    grad_sigma: Callable[[np.ndarray], np.ndarray]
    derivative_bound: float
    notes: str = ""

    def __post_init__(self) -> None:
        x0 = np.atleast_1d(np.asarray(self.X0, dtype=float))
        if x0.shape != (self.d,):
            raise ValueError(f"X0 must have shape ({self.d},)")
        object.__setattr__(self, "X0", x0)


def _linear(beta: float = 0.5, sigma0: float = 0.8, x0: float = 1.0) -> Model:
    def b(x):
        return beta * x

    def sigma(x):
        return sigma0 * x[..., None]

    def grad_b(x):
        return np.broadcast_to(np.array([[beta]]), x.shape + (1,)).copy()

    def grad_sigma(x):
        return np.broadcast_to(np.array([[[sigma0]]]), x.shape + (1, 1)).copy()

    return Model(
        name="linear", d=1, m=1, X0=np.array([x0]),
        b=b, sigma=sigma, grad_b=grad_b, grad_sigma=grad_sigma,
        derivative_bound=max(abs(beta), abs(sigma0)),
        notes=f"b(x)={beta}*x, sigma(x)={sigma0}*x; constant derivatives",
    )


def _trig() -> Model:
    def b(x):
        return np.cos(x)

    def sigma(x):
        return (2.0 + np.sin(x))[..., None]

    def grad_b(x):
        return -np.sin(x)[..., None]

    def grad_sigma(x):
        return np.cos(x)[..., None, None]

    return Model(
        name="trig", d=1, m=1, X0=np.array([0.0]),
        b=b, sigma=sigma, grad_b=grad_b, grad_sigma=grad_sigma,
        derivative_bound=1.0,
        notes="b=cos x, sigma=2+sin x; everything bounded",
    )


def _planar() -> Model:
    def b(x):
        return 0.1 * np.tanh(x)

    def sigma(x):
        out = np.empty(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 2.0 + np.sin(x[..., 0])
        out[..., 0, 1] = 0.5 * np.cos(x[..., 1])
        out[..., 1, 0] = 0.3
        out[..., 1, 1] = 1.0
        return out

    def grad_b(x):
        out = np.zeros(x.shape + (2,))
        sech2 = 0.1 / np.cosh(x) ** 2
        out[..., 0, 0] = sech2[..., 0]
        out[..., 1, 1] = sech2[..., 1]
        return out

    def grad_sigma(x):
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, 0, 0] = np.cos(x[..., 0])
        out[..., 0, 1, 1] = -0.5 * np.sin(x[..., 1])
        return out

    return Model(
        name="planar", d=2, m=2, X0=np.array([0.5, -0.3]),
        b=b, sigma=sigma, grad_b=grad_b, grad_sigma=grad_sigma,
        derivative_bound=1.0,
        notes="d=m=2; b=0.1*tanh per coordinate, mixed trigonometric sigma",
    )


def _const(b0: float = 0.3, sigma0: float = 0.9) -> Model:
    def b(x):
        return np.full_like(x, b0)

    def sigma(x):
        return np.full(x.shape + (1,), sigma0)

    def grad_b(x):
        return np.zeros(x.shape + (1,))

    def grad_sigma(x):
        return np.zeros(x.shape + (1, 1))

    return Model(
        name="const", d=1, m=1, X0=np.array([1.0]),
        b=b, sigma=sigma, grad_b=grad_b, grad_sigma=grad_sigma,
        derivative_bound=0.0,
        notes="constant coefficients; the scheme integrates the equation "
              "exactly and the normalized error vanishes",
    )


_REGISTRY: dict[str, Callable[..., Model]] = {
    "linear": _linear,
    "trig": _trig,
    "planar": _planar,
    "const": _const,
}

MODEL_NAMES = tuple(_REGISTRY)


def get_model(name: str, **overrides) -> Model:
    """Instantiate a built-in model by name (overrides reach the factory)."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(
            f"unknown model {name!r}; available: {', '.join(_REGISTRY)}"
        ) from None
    return factory(**overrides)


def model_table() -> list[dict]:
    """Rows describing every built-in model, for the CLI listing."""
    rows = []
    for name in _REGISTRY:
        model = _REGISTRY[name]()
        dev = check_gradients(model)
        rows.append({
            "name": name,
            "d": model.d,
            "m": model.m,
            "X0": model.X0.tolist(),
            "derivative_bound": model.derivative_bound,
            "gradient_check": dev,
            "notes": model.notes,
        })
    return rows


def check_gradients(model: Model, points: np.ndarray | None = None,
                    fd_eps: float = 1e-6) -> float:
    """Max deviation between analytic Jacobians and central finite differences.

    Probes a small grid around X0 (unless explicit points are given) and also
    verifies the analytic derivatives stay below the declared bound.  Returns
    the maximal absolute deviation; models should stay below 1e-5.
    """
    if points is None:
        offsets = np.array([-1.7, -0.6, 0.0, 0.4, 1.3])
        points = model.X0[None, :] + offsets[:, None]
        if model.d > 1:
            rng = np.random.Generator(np.random.Philox(key=7))
            points = model.X0[None, :] + rng.uniform(-1.5, 1.5, size=(8, model.d))
    points = np.atleast_2d(points)
    worst = 0.0
    for x in points:
        gb = model.grad_b(x)
        gs = model.grad_sigma(x)
        bound = model.derivative_bound + 1e-12
        if np.abs(gb).max() > bound or np.abs(gs).max() > bound:
            raise ValueError(
                f"model {model.name}: analytic derivative exceeds the declared "
                f"bound {model.derivative_bound}"
            )
        for k in range(model.d):
            e = np.zeros(model.d)
            e[k] = fd_eps
            fd_b = (model.b(x + e) - model.b(x - e)) / (2 * fd_eps)
            fd_s = (model.sigma(x + e) - model.sigma(x - e)) / (2 * fd_eps)
            worst = max(worst, float(np.abs(fd_b - gb[..., :, k]).max()))
            worst = max(worst, float(np.abs(fd_s - gs[..., :, :, k]).max()))
    return worst
