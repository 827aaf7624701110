"""Path solvers: the exact-increment scheme, an Euler baseline, and coupled
fine/coarse runs whose difference estimates the discretization error.

The exact-increment scheme advances on the grid t_k = k*T/n by combining the
closed-form kernel integrals (drift) with the jointly Gaussian kernel-weighted
increments supplied per step (diffusion); for constant coefficients it
reproduces the exact solution at every grid point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import MAX_FINE_STEPS, _chunk_draws, _chunk_plan, _fine_factor
from .errors import DivergenceError, ResourceLimitError
from .gaussian import FactorizedCovariance, sample_step, StreamKey
from .kernel import KernelParams, kernel_integral, kernel_value
from .models import Model

__all__ = [
    "GridPath",
    "PathDraws",
    "CoupledRun",
    "sample_path_draws",
    "simulate_path",
    "simulate_euler",
    "simulate_coupled",
    "aggregate_fine_to_coarse",
    "evaluate_between",
    "write_path_csv",
]

_STATE_BOUND = 1e12


@dataclass(frozen=True)
class GridPath:
    """Values of a d-dimensional process on an increasing time grid."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if v.shape[0] != t.shape[0]:
            raise ValueError("times and values must have matching length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def n_steps(self) -> int:
        return self.times.shape[0] - 1

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PathDraws:
    """Per-step Gaussian vectors for one path, one array per step.

    ``steps[k-1]`` has shape (horizons_k + 1, m): row 0 is the plain Brownian
    increment of step k, row i the kernel-weighted increment at horizon i.
    """

    n: int
    m: int
    steps: tuple[np.ndarray, ...]

    def step(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.n:
            raise ValueError(f"step index {k} out of range 1..{self.n}")
        return self.steps[k - 1]

    def plain_increments(self) -> np.ndarray:
        """(n, m) matrix of the plain Brownian increments."""
        return np.stack([s[0] for s in self.steps])


@dataclass(frozen=True)
class CoupledRun:
    """A fine reference path and a nested coarse path on shared randomness."""

    fine: GridPath
    coarse: GridPath
    scaled_error: GridPath
    fine_draws: PathDraws
    coarse_draws: PathDraws
    params: KernelParams
    model: Model
    n: int
    m_ratio: int


def sample_path_draws(p: KernelParams, factor: np.ndarray | FactorizedCovariance,
                      n: int, m: int, master_seed: int, replication: int = 0,
                      component_base: int = 0) -> PathDraws:
    """Draw the full per-step Gaussian family for one path.

    Uses the same chunked counter-based streams as the ensemble engine, so
    replication r here sees the same randomness as replication r of an
    ensemble run with the same seed.
    """
    fmat = factor.factor if isinstance(factor, FactorizedCovariance) else factor
    if fmat.shape[0] != n + 1:
        raise ValueError(f"factor dimension {fmat.shape[0]} does not match n={n}")
    if fmat.shape[1] != fmat.shape[0]:
        raise ValueError("chunked sampling needs a square triangular factor; "
                         "use sample_path_draws_per_step for low-rank factors")
    rows: list[np.ndarray | None] = [None] * n
    reps = range(replication, replication + 1)
    for ordinal, (k0, k1, width) in enumerate(_chunk_plan(n)):
        ft = np.ascontiguousarray(fmat[:width, :width].T)
        per_comp = [
            _chunk_draws(master_seed, reps, component_base + j, ordinal,
                         k1 - k0, width, ft)
            for j in range(m)
        ]
        for k in range(k0, k1):
            mk = n - k + 2
            rows[k - 1] = np.stack(
                [per_comp[j][0, k - k0, :mk] for j in range(m)], axis=1
            )
    return PathDraws(n=n, m=m, steps=tuple(rows))


def sample_path_draws_per_step(p: KernelParams, fact: FactorizedCovariance,
                               n: int, m: int, master_seed: int,
                               replication: int = 0,
                               component_base: int = 0) -> PathDraws:
    """Like :func:`sample_path_draws` but via per-step :func:`sample_step` keys."""
    rows = []
    for k in range(1, n + 1):
        cols = []
        for j in range(m):
            key = StreamKey(master_seed, replication, component_base + j, k)
            cols.append(sample_step(fact, n - k + 1, key))
        rows.append(np.stack(cols, axis=1))
    return PathDraws(n=n, m=m, steps=tuple(rows))


def _guard(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)) or np.abs(x).max() > _STATE_BOUND:
        raise DivergenceError(f"path diverged at step {step}", step=step)


def simulate_path(model: Model, p: KernelParams, n: int,
                   draws: PathDraws) -> GridPath:
    """Exact-increment scheme on the n-step grid, driven by given draws.

    State at t_k accumulates, over earlier steps j < k, the drift
    b(X_{t_j}) times the closed-form kernel integral over step j at lag
    k - j, plus sigma(X_{t_j}) applied to step (j+1)'s kernel-weighted
    increment at horizon k - j.  Cost O(n^2 d m).
    """
    if draws.n != n or draws.m != model.m:
        raise ValueError("draws do not match the requested grid/model")
    dt = p.T / n
    idx = np.arange(1, n + 1, dtype=float)
    w = np.zeros(n + 1)
    w[1:] = kernel_integral(p, (idx - 1.0) * dt, idx * dt)
    d = model.d
    acc = np.zeros((n + 1, d))
    x = np.empty((n + 1, d))
    x[0] = model.X0
    for k in range(1, n + 1):
        bv = model.b(x[k - 1])
        sv = model.sigma(x[k - 1])
        dk = draws.step(k)
        mk = n - k + 2
        acc[k:] += bv[None, :] * w[1:mk, None]
        for j in range(model.m):
            acc[k:] += sv[:, j][None, :] * dk[1:mk, j][:, None]
        x[k] = model.X0 + acc[k]
        if k % 64 == 0 or k == n:
            _guard(x[k], k)
    return GridPath(times=np.linspace(0.0, p.T, n + 1), values=x)


def simulate_euler(model: Model, p: KernelParams, n: int,
                   plain_increments: np.ndarray) -> GridPath:
    """Euler-type baseline: one kernel evaluation per (step, lag) pair.

    X_{t_k} = X0 + sum_{j<k} K(t_k - t_j) [b(X_{t_j}) dt + sigma(X_{t_j}) dW_j]
    with the kernel frozen at the left endpoint (t_k - t_j >= dt keeps it
    finite).  This is the rank-one shortcut the exact scheme improves on;
    its own error analysis is out of scope here, it serves as a baseline.
    """
    dw = np.asarray(plain_increments, dtype=float)
    if dw.shape != (n, model.m):
        raise ValueError(f"plain increments must have shape ({n}, {model.m})")
    dt = p.T / n
    kv = np.zeros(n + 1)
    kv[1:] = kernel_value(p, np.arange(1, n + 1) * dt)
    acc = np.zeros((n + 1, model.d))
    x = np.empty((n + 1, model.d))
    x[0] = model.X0
    for k in range(1, n + 1):
        j = k - 1
        vals = model.b(x[j]) * dt + model.sigma(x[j]) @ dw[j]
        acc[k:] += kv[1:n - j + 1, None] * vals[None, :]
        x[k] = model.X0 + acc[k]
        if k % 64 == 0 or k == n:
            _guard(x[k], k)
    return GridPath(times=np.linspace(0.0, p.T, n + 1), values=x)


def aggregate_fine_to_coarse(fine: PathDraws, n: int, m_ratio: int) -> PathDraws:
    """Sum fine-step draws into the coarse-step Gaussian family, exactly.

    Coarse step k at horizon i collects the fine increments whose horizon
    lands on the fine index of coarse time t_{k+i-1}; plain increments add
    up directly.  The aggregate has exactly the coarse-grid law because the
    coarse horizons are fine grid points.
    """
    if fine.n != n * m_ratio:
        raise ValueError("fine draws do not match n * m_ratio steps")
    rows = []
    for kc in range(1, n + 1):
        nh = n - kc + 1
        out = np.zeros((nh + 1, fine.m))
        for f in range((kc - 1) * m_ratio + 1, kc * m_ratio + 1):
            step = fine.step(f)
            out[0] += step[0]
            q = (kc - 1 + np.arange(1, nh + 1)) * m_ratio - f + 1
            out[1:] += step[q]
        rows.append(out)
    return PathDraws(n=n, m=fine.m, steps=tuple(rows))


def simulate_coupled(model: Model, p: KernelParams, n: int, m_ratio: int,
                     master_seed: int, replication: int = 0) -> CoupledRun:
    """One coupled run: fine reference, nested coarse path, scaled error.

    The fine Gaussian family is drawn once at resolution N = n * m_ratio,
    aggregated exactly to the coarse grid, and both paths are solved from
    the shared randomness; scaled_error is the coarse-grid error scaled by the
    inverse mesh to the power H.  All draws are retained for reuse by the
    analysis and limit modules.
    """
    if m_ratio < 1:
        raise ValueError("m_ratio must be >= 1")
    n_fine = n * m_ratio
    if n_fine > MAX_FINE_STEPS:
        raise ResourceLimitError(
            f"fine grid {n_fine} exceeds the configured maximum {MAX_FINE_STEPS}"
        )
    factor = _fine_factor(p, n_fine)
    fine_draws = sample_path_draws(p, factor, n_fine, model.m, master_seed,
                                   replication)
    fine = simulate_path(model, p, n_fine, fine_draws)
    coarse_draws = aggregate_fine_to_coarse(fine_draws, n, m_ratio)
    coarse = simulate_path(model, p, n, coarse_draws)
    dtc = p.T / n
    u = dtc ** (-p.H) * (fine.values[::m_ratio] - coarse.values)
    scaled_error = GridPath(times=coarse.times, values=u)
    return CoupledRun(
        fine=fine, coarse=coarse, scaled_error=scaled_error, fine_draws=fine_draws,
        coarse_draws=coarse_draws, params=p, model=model, n=n, m_ratio=m_ratio,
    )


def evaluate_between(run: CoupledRun, s: float) -> np.ndarray:
    """Evaluate the coarse scheme's defining equation at an off-grid time.

    ``s`` must lie on the fine grid of the coupled run.  Coefficients are
    frozen at the coarse left endpoints; the stochastic part aggregates the
    retained fine-step increments at the horizon matching ``s``.  At coarse
    grid points this returns the stored coarse value bit for bit.
    """
    p = run.params
    model = run.model
    n_fine = run.n * run.m_ratio
    dtf = p.T / n_fine
    q = s / dtf
    qi = int(round(q))
    if not 0 <= qi <= n_fine or abs(q - qi) > 1e-9 * max(1.0, n_fine):
        raise ValueError(f"time {s} is not on the fine grid")
    if qi % run.m_ratio == 0:
        return run.coarse.values[qi // run.m_ratio].copy()
    c = qi // run.m_ratio
    dtc = p.T / run.n
    out = model.X0.astype(float).copy()
    for j in range(c):
        w = kernel_integral(p, s - (j + 1) * dtc, s - j * dtc)
        out += model.b(run.coarse.values[j]) * w
    out += model.b(run.coarse.values[c]) * kernel_integral(p, 0.0, s - c * dtc)
    for f in range(1, qi + 1):
        cell = (f - 1) // run.m_ratio
        sv = model.sigma(run.coarse.values[cell])
        out += sv @ run.fine_draws.step(f)[qi - f + 1]
    return out


def write_path_csv(path, grid_path: GridPath) -> None:
    """Write a path as CSV: header t,x1..xd, shortest round-trip decimals."""
    d = grid_path.d
    header = "t," + ",".join(f"x{i + 1}" for i in range(d))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for t, row in zip(grid_path.times, grid_path.values):
            fh.write(",".join(repr(float(v)) for v in (t, *row)) + "\n")
