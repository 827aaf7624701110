"""Simulation of the limiting error equation and two-sample law comparison.

The scaled discretization error converges in law to the solution of a linear
equation with the same kernel: the error feeds back through the coefficient
Jacobians along the reference path, and an independent noise enters through
an m^2-dimensional Brownian family scaled by C_H = sqrt(c_limit).  Here that
equation is discretized by the same exact-increment scheme, with
coefficients frozen at the grid points of the supplied reference path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import kolmogorov

from .engine import _fine_factor
from .errors import DivergenceError
from .kernel import KernelParams, kernel_integral
from .models import Model
from .scheme import GridPath, PathDraws, sample_path_draws

__all__ = [
    "LimitRunInputs",
    "ComparisonReport",
    "make_limit_noise_draws",
    "simulate_limit_path",
    "compare_distributions",
]


@dataclass(frozen=True)
class LimitRunInputs:
    """Everything the limiting-error recursion needs on one grid.

    ``x_path`` is the reference solution on the coarse grid; ``w_draws`` are
    the (kernel-weighted + plain) increments of the driving noise reused
    from the same randomness as the reference; ``b_draws`` is an independent
    family of identical structure with m^2 components, one per pair
    (l, j) at flat index l*m + j.
    """

    x_path: GridPath
    w_draws: PathDraws
    b_draws: PathDraws
    model: Model
    params: KernelParams

    def __post_init__(self) -> None:
        n = self.x_path.n_steps
        m = self.model.m
        if self.w_draws.n != n or self.b_draws.n != n:
            raise ValueError("draw grids do not match the reference path grid")
        if self.w_draws.m != m:
            raise ValueError(f"w_draws must have {m} components")
        if self.b_draws.m != m * m:
            raise ValueError(f"b_draws must have {m * m} components")
        if self.x_path.d != self.model.d:
            raise ValueError("reference path dimension does not match model")


def make_limit_noise_draws(p: KernelParams, n: int, m: int, master_seed: int,
                           replication: int = 0) -> PathDraws:
    """Independent kernel-weighted draws for the m^2 extra noise components.

    Uses the component namespace right after the m driving components, so
    independence from the driving randomness is a property of the keying,
    not of any extra machinery.
    """
    factor = _fine_factor(p, n)
    return sample_path_draws(p, factor, n, m * m, master_seed, replication,
                             component_base=m)


def simulate_limit_path(inputs: LimitRunInputs) -> GridPath:
    """Solve the limiting error equation on the grid, starting from zero.

    Per step the drift applies the drift Jacobian to the current error; the
    driving-noise term applies the diffusion Jacobians to the current error
    against the reused increments; the independent term applies the
    Jacobian-diffusion contraction along the reference path, scaled by
    -C_H, against the independent increments.  Constant-coefficient models
    have identically zero Jacobians, hence an identically zero solution.
    """
    model = inputs.model
    p = inputs.params
    n = inputs.x_path.n_steps
    d, m = model.d, model.m
    dt = p.T / n
    idx = np.arange(1, n + 1, dtype=float)
    w = np.zeros(n + 1)
    w[1:] = kernel_integral(p, (idx - 1.0) * dt, idx * dt)

    acc = np.zeros((n + 1, d))
    x_ref = inputs.x_path.values
    for k in range(1, n + 1):
        u = acc[k - 1] if k > 1 else np.zeros(d)
        x = x_ref[k - 1]
        gb = model.grad_b(x)         # (d, d)
        gs = model.grad_sigma(x)     # (d, m, d)
        sg = model.sigma(x)          # (d, m)
        mk = n - k + 2
        wd = inputs.w_draws.step(k)
        bd = inputs.b_draws.step(k)
        acc[k:] += (gb @ u)[None, :] * w[1:mk, None]
        for j in range(m):
            acc[k:] += (gs[:, j, :] @ u)[None, :] * wd[1:mk, j][:, None]
            for l in range(m):
                load = gs[:, j, :] @ sg[:, l]
                acc[k:] -= p.C_H * load[None, :] * bd[1:mk, l * m + j][:, None]
        if not np.all(np.isfinite(acc[k])):
            raise DivergenceError(f"limit path diverged at step {k}", step=k)
    u_vals = np.vstack([np.zeros((1, d)), acc[1:]])
    return GridPath(times=inputs.x_path.times, values=u_vals)


def _moments_with_ci(samples: np.ndarray) -> dict:
    """Mean and variance of each column with 95% normal-approximation CIs."""
    R = samples.shape[0]
    mean = samples.mean(axis=0)
    var = samples.var(axis=0, ddof=1)
    mean_hw = 1.96 * np.sqrt(var / R)
    centered = samples - mean
    m4 = (centered ** 4).mean(axis=0)
    var_of_var = np.maximum(m4 - (var * (R - 1) / R) ** 2, 0.0) / R
    var_hw = 1.96 * np.sqrt(var_of_var)
    return {
        "mean": mean.tolist(),
        "mean_ci": mean_hw.tolist(),
        "var": var.tolist(),
        "var_ci": var_hw.tolist(),
        "count": int(R),
    }


def _cov_with_ci(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample covariance matrix cov(a_i, b_j) and 95% CI half-widths."""
    R = a.shape[0]
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    cov = ac.T @ bc / (R - 1)
    second = np.einsum("ri,rj->ij", ac ** 2, bc ** 2) / R
    var_cov = np.maximum(second - cov ** 2, 0.0) / R
    return cov, 1.96 * np.sqrt(var_cov)


def ks_statistic(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.

    D is the sup-distance of the empirical CDFs; the p-value evaluates the
    asymptotic Kolmogorov distribution at sqrt(na*nb/(na+nb)) * D.
    """
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        raise ValueError("both samples must be nonempty")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / na
    cdf_b = np.searchsorted(b, grid, side="right") / nb
    d = float(np.abs(cdf_a - cdf_b).max())
    lam = np.sqrt(na * nb / (na + nb)) * d
    return d, float(kolmogorov(lam))


@dataclass(frozen=True)
class ComparisonReport:
    """Distribution comparison between the scaled error and its limit."""

    scheme: dict
    limit: dict
    ks: list[dict]
    cov_w_scheme: dict | None
    cov_w_limit: dict | None
    count_mismatch: bool

    def variance_cis_overlap(self) -> bool:
        lo_s = np.array(self.scheme["var"]) - np.array(self.scheme["var_ci"])
        hi_s = np.array(self.scheme["var"]) + np.array(self.scheme["var_ci"])
        lo_l = np.array(self.limit["var"]) - np.array(self.limit["var_ci"])
        hi_l = np.array(self.limit["var"]) + np.array(self.limit["var_ci"])
        return bool(np.all(np.maximum(lo_s, lo_l) <= np.minimum(hi_s, hi_l)))

    def cov_diagnostic_overlaps(self) -> bool | None:
        if self.cov_w_scheme is None or self.cov_w_limit is None:
            return None
        lo_s = np.array(self.cov_w_scheme["cov"]) - np.array(self.cov_w_scheme["ci"])
        hi_s = np.array(self.cov_w_scheme["cov"]) + np.array(self.cov_w_scheme["ci"])
        lo_l = np.array(self.cov_w_limit["cov"]) - np.array(self.cov_w_limit["ci"])
        hi_l = np.array(self.cov_w_limit["cov"]) + np.array(self.cov_w_limit["ci"])
        return bool(np.all(np.maximum(lo_s, lo_l) <= np.minimum(hi_s, hi_l)))

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "limit": self.limit,
            "ks": self.ks,
            "cov_w_scheme": self.cov_w_scheme,
            "cov_w_limit": self.cov_w_limit,
            "count_mismatch": self.count_mismatch,
            "variance_cis_overlap": self.variance_cis_overlap(),
            "cov_diagnostic_overlaps": self.cov_diagnostic_overlaps(),
        }


def compare_distributions(err_samples: np.ndarray, limit_samples: np.ndarray,
                          w_samples: np.ndarray | None = None) -> ComparisonReport:
    """Compare terminal scaled-error samples against simulated limit samples.

    Reports per-coordinate moments with CIs and a per-coordinate two-sample
    KS test.  When terminal driving-noise values are supplied (paired with
    both ensembles), also reports the joint-covariance diagnostic
    cov(err, W_T) vs cov(limit, W_T): matching joint covariances with fixed
    randomness is the observable trace of stable (not just plain)
    convergence.
    """
    err_samples = np.atleast_2d(np.asarray(err_samples, dtype=float))
    limit_samples = np.atleast_2d(np.asarray(limit_samples, dtype=float))
    if err_samples.ndim == 2 and err_samples.shape[0] == 1:
        err_samples = err_samples.T
    if limit_samples.ndim == 2 and limit_samples.shape[0] == 1:
        limit_samples = limit_samples.T
    if err_samples.shape[0] < 2 or limit_samples.shape[0] < 2:
        raise ValueError("need at least two samples per ensemble")
    mismatch = err_samples.shape[0] != limit_samples.shape[0]

    ks = []
    for i in range(err_samples.shape[1]):
        d_stat, p_val = ks_statistic(err_samples[:, i], limit_samples[:, i])
        ks.append({"coordinate": i, "statistic": d_stat, "p_value": p_val})

    cov_s = cov_l = None
    if w_samples is not None:
        w_samples = np.atleast_2d(np.asarray(w_samples, dtype=float))
        if w_samples.shape[0] == err_samples.shape[0]:
            c, hw = _cov_with_ci(err_samples, w_samples)
            cov_s = {"cov": c.tolist(), "ci": hw.tolist()}
        if w_samples.shape[0] == limit_samples.shape[0]:
            c, hw = _cov_with_ci(limit_samples, w_samples)
            cov_l = {"cov": c.tolist(), "ci": hw.tolist()}

    return ComparisonReport(
        scheme=_moments_with_ci(err_samples),
        limit=_moments_with_ci(limit_samples),
        ks=ks,
        cov_w_scheme=cov_s,
        cov_w_limit=cov_l,
        count_mismatch=mismatch,
    )
