"""Step covariance of the kernel-weighted Gaussian increments, and sampling.

One simulation step over [t_{k-1}, t_k] needs the joint draw of the plain
Brownian increment together with the kernel-weighted integrals
int_{t_{k-1}}^{t_k} K(t_{k+i-1} - s) dW_s for every remaining horizon i.
That joint law is the same for every step, so a single (n+1) x (n+1)
covariance table (index 0 = plain increment) is factorized once and reused.
The table is nearly rank-deficient for H close to 1/2, hence the jitter
escalation in :func:`factorize` and the optional low-rank projection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import lapack
from scipy.special import roots_jacobi, roots_legendre

from .errors import FactorizationError
from .kernel import (
    KernelParams,
    kernel_integral,
    kernel_square_integral,
    kernel_value,
)

__all__ = [
    "CovarianceTable",
    "FactorizedCovariance",
    "RegularizationPolicy",
    "StreamKey",
    "build_covariance",
    "factorize",
    "low_rank_project",
    "sample_step",
    "save_factor",
    "load_factor",
]

_QUAD_NODES = 48  # fixed-order rules; spectrally accurate for these integrands


@dataclass(frozen=True)
class CovarianceTable:
    """Symmetric (n+1) x (n+1) step covariance, index 0 = plain increment."""

    n: int
    dt: float
    entries: np.ndarray

    def __post_init__(self) -> None:
        e = self.entries
        if e.shape != (self.n + 1, self.n + 1):
            raise ValueError("entries must be (n+1) x (n+1)")
        if not np.array_equal(e, e.T):
            raise ValueError("covariance table must be symmetric")


@dataclass(frozen=True)
class FactorizedCovariance:
    """A factor F with F @ F.T reproducing the covariance table.

    ``kind`` is "cholesky" (square, lower-triangular, possibly jittered) or
    "eigen" (rectangular low-rank factor).  ``approx_error`` is the relative
    Frobenius reconstruction error for low-rank factors, None otherwise.
    """

    factor: np.ndarray
    effective_rank: int
    regularization_used: float
    kind: str = "cholesky"
    approx_error: float | None = None

    @property
    def dim(self) -> int:
        return self.factor.shape[0]


@dataclass(frozen=True)
class RegularizationPolicy:
    """Diagonal jitter escalation and the pivot threshold for the rank count."""

    jitters: tuple[float, ...] = (0.0, 1e-14, 1e-12, 1e-10)
    pivot_rel_tol: float = 1e-12


@dataclass(frozen=True)
class StreamKey:
    """Addresses one independent Gaussian stream in a reproducible way.

    Distinct keys give statistically independent streams; the same key always
    reproduces the same draw.  ``component`` indexes the Brownian coordinate
    (driving components first, auxiliary/independent components after them);
    ``step`` is the simulation step the draw belongs to.
    """

    master_seed: int
    replication: int = 0
    component: int = 0
    step: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.master_seed < 2 ** 64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if not 0 <= self.component < 2 ** 12:
            raise ValueError("component must be in [0, 4096)")
        if not 0 <= self.replication < 2 ** 25:
            raise ValueError("replication must be in [0, 2**25)")
        if not 0 <= self.step < 2 ** 26:
            raise ValueError("step must be in [0, 2**26)")

    def _packed(self, tag: int) -> np.ndarray:
        word = (tag << 63) | (self.component << 51) | (self.replication << 26) | self.step
        return np.array([self.master_seed, word], dtype=np.uint64)

    def generator(self) -> np.random.Generator:
        """Counter-based generator for this key (per-step addressing)."""
        return np.random.Generator(np.random.Philox(key=self._packed(0)))


def _stream_generator(master_seed: int, replication: int, component: int,
                      chunk_index: int) -> np.random.Generator:
    """Generator for one fixed-size step chunk of the bulk simulation engine.

    Lives in a key namespace disjoint from StreamKey.generator() (tag bit), so
    bulk streams never collide with per-step draws.
    """
    key = StreamKey(master_seed, replication, component, chunk_index)
    return np.random.Generator(np.random.Philox(key=key._packed(1)))


def build_covariance(p: KernelParams, n: int) -> CovarianceTable:
    """Build the augmented step covariance for an n-step grid on [0, T].

    Index 0 holds the plain increment (variance dt, cross-covariance with
    horizon i equal to the kernel integral over [(i-1)dt, i*dt]); indices
    1..n hold int_0^dt K(i*dt - s) K(j*dt - s) ds.

    The diagonal, row 0 and row 1 use closed forms or a weighted Gauss rule
    for the endpoint singularity; the smooth (i, j >= 2) block is a Gram
    matrix over shared Gauss-Legendre nodes, which agrees with the adaptive
    :func:`fracsve.kernel.covariance_entry` to near machine precision.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    dt = p.T / n
    ent = np.empty((n + 1, n + 1))

    idx = np.arange(1, n + 1, dtype=float)
    ent[0, 0] = dt
    row0 = kernel_integral(p, (idx - 1.0) * dt, idx * dt)
    ent[0, 1:] = row0
    ent[1:, 0] = row0

    # Smooth block i, j >= 2: Sigma_ij = sum_q w_q K((i-1)dt + u_q) K((j-1)dt + u_q)
    if n >= 2:
        x, w = roots_legendre(_QUAD_NODES)
        u = 0.5 * dt * (x + 1.0)
        wts = 0.5 * dt * w
        kmat = kernel_value(p, (idx[1:, None] - 1.0) * dt + u[None, :])  # (n-1, Q)
        ent[2:, 2:] = (kmat * wts) @ kmat.T

    # Row 1 (and column 1), j >= 2: weight u^(H-1/2) Gauss-Jacobi rule.
    if n >= 2:
        xj, wj = roots_jacobi(_QUAD_NODES, 0.0, p.H - 0.5)
        uj = 0.5 * dt * (xj + 1.0)
        scale = (0.5 * dt) ** (p.H + 0.5) / np.sqrt(p.G)
        gmat = kernel_value(p, (idx[1:, None] - 1.0) * dt + uj[None, :])  # (n-1, Q)
        row1 = scale * (gmat @ wj)
        ent[1, 2:] = row1
        ent[2:, 1] = row1

    ent[np.arange(1, n + 1), np.arange(1, n + 1)] = kernel_square_integral(
        p, (idx - 1.0) * dt, idx * dt
    )
    ent = np.triu(ent) + np.triu(ent, 1).T  # exact symmetry
    return CovarianceTable(n=n, dt=dt, entries=ent)


def factorize(table: CovarianceTable,
              policy: RegularizationPolicy | None = None) -> FactorizedCovariance:
    """Lower-triangular factorization with escalating diagonal jitter.

    Attempts a plain Cholesky factorization first; on breakdown (non-positive
    pivot, as reported by LAPACK) restarts with additive jitter
    eps * trace / (n+1) for eps in the policy's escalation schedule.  The
    effective rank counts pivots above ``pivot_rel_tol`` times the largest
    pivot, which exposes the near-degeneracy of the table as H -> 1/2.
    """
    policy = policy or RegularizationPolicy()
    sigma = table.entries
    dim = sigma.shape[0]
    base = np.trace(sigma) / dim
    last_info = None
    for eps in policy.jitters:
        attempt = sigma if eps == 0.0 else sigma + (eps * base) * np.eye(dim)
        c, info = lapack.dpotrf(attempt, lower=1)
        if info == 0:
            factor = np.tril(c)
            pivots = np.diag(factor) ** 2
            eff = int(np.sum(pivots > policy.pivot_rel_tol * pivots.max()))
            return FactorizedCovariance(
                factor=factor,
                effective_rank=eff,
                regularization_used=float(eps * base),
                kind="cholesky",
            )
        last_info = info
    raise FactorizationError(
        f"factorization failed at leading minor {last_info} even with jitter",
        pivot_index=int(last_info) if last_info else None,
        jitters_tried=policy.jitters,
    )


def low_rank_project(table: CovarianceTable, r: int) -> FactorizedCovariance:
    """Best rank-r PSD approximation via truncated eigendecomposition.

    Negative eigenvalues are clipped to zero.  The factor is (n+1) x r with
    columns ordered by decreasing eigenvalue, and the relative Frobenius
    error of the reconstruction is reported on the result.
    """
    dim = table.entries.shape[0]
    if not 1 <= r <= dim:
        raise ValueError(f"rank must be in [1, {dim}]")
    w, v = np.linalg.eigh(table.entries)
    w = np.clip(w, 0.0, None)
    order = np.argsort(w)[::-1][:r]
    factor = v[:, order] * np.sqrt(w[order])
    recon = factor @ factor.T
    denom = np.linalg.norm(table.entries)
    err = float(np.linalg.norm(table.entries - recon) / denom) if denom > 0 else 0.0
    wmax = w.max() if w.size else 0.0
    eff = int(np.sum(w[order] > 1e-12 * wmax)) if wmax > 0 else 0
    return FactorizedCovariance(
        factor=factor,
        effective_rank=eff,
        regularization_used=0.0,
        kind="eigen",
        approx_error=err,
    )


def sample_step(f: FactorizedCovariance, remaining: int, key: StreamKey) -> np.ndarray:
    """Draw one step vector of length remaining+1 (plain increment first).

    For triangular factors the draw uses the leading principal block, so the
    law matches the corresponding marginal of the full-dimension draw; for
    low-rank factors the full column space is always used.  Deterministic
    given the key.
    """
    k = remaining + 1
    if k > f.dim:
        raise ValueError(f"remaining+1 = {k} exceeds factor dimension {f.dim}")
    cols = min(k, f.factor.shape[1]) if f.kind == "cholesky" else f.factor.shape[1]
    z = key.generator().standard_normal(cols)
    return f.factor[:k, :cols] @ z


_CACHE_MAGIC = b"FSVECOV1"
_CACHE_VERSION = 2


def save_factor(path: str | Path, p: KernelParams, n: int,
                f: FactorizedCovariance) -> None:
    """Write a factor cache file.

    Little-endian layout: magic "FSVECOV1", u32 version, f64 H, f64 T,
    u64 n, u64 rows, u64 cols, u8 kind (0=cholesky, 1=eigen), f64
    regularization_used, u64 effective_rank, then the factor row-major f64.
    """
    kind_code = 0 if f.kind == "cholesky" else 1
    rows, cols = f.factor.shape
    header = _CACHE_MAGIC + struct.pack(
        "<IddQQQBdQ", _CACHE_VERSION, p.H, p.T, n, rows, cols, kind_code,
        f.regularization_used, f.effective_rank,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(f.factor, dtype="<f8").tobytes())


def load_factor(path: str | Path) -> tuple[KernelParams, int, FactorizedCovariance]:
    """Read a factor cache file written by :func:`save_factor`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CACHE_MAGIC))
        if magic != _CACHE_MAGIC:
            raise ValueError(f"not a factor cache file: bad magic {magic!r}")
        head_fmt = "<IddQQQBdQ"
        head = struct.unpack(head_fmt, fh.read(struct.calcsize(head_fmt)))
        version, H, T, n, rows, cols, kind_code, reg, eff = head
        if version != _CACHE_VERSION:
            raise ValueError(f"unsupported cache version {version}")
        data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
    factor = data.reshape(rows, cols).astype(float)
    f = FactorizedCovariance(
        factor=factor,
        effective_rank=int(eff),
        regularization_used=float(reg),
        kind="cholesky" if kind_code == 0 else "eigen",
    )
    return KernelParams(H=H, T=T), int(n), f
