"""Batched Monte Carlo engine for coupled fine/coarse path ensembles.

The recursion for the exact-increment scheme consumes, at grid step k, one
kernel-weighted increment from every earlier step.  The engine streams the
per-step Gaussian draws once, scattering each step's contribution into
"future value" accumulators, so the coupled fine path, the coarse path(s),
the between-grid evaluations of the coarse scheme, and the limiting error
equation all ride on a single pass over the fine grid.

Reproducibility contract: draws are keyed by (master_seed, replication,
component, chunk) with a fixed chunk length ``Z_CHUNK`` and fixed block size
``R_BLOCK``; results are bit-identical across worker counts and reruns.
These two constants are part of the on-disk reproducibility contract; change
either and archived seeds reproduce different numbers.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ResourceLimitError
from .gaussian import _stream_generator, build_covariance, factorize
from .kernel import KernelParams, kernel_integral
from .models import Model, get_model

__all__ = ["CoarseRequest", "CoarseResult", "EnsembleResult", "run_coupled_ensemble"]

Z_CHUNK = 128
R_BLOCK = 32
STATE_BOUND = 1e12
MAX_FINE_STEPS = 1 << 14


@dataclass(frozen=True)
class CoarseRequest:
    """What to compute for one coarse resolution nested in the fine grid."""

    n: int
    want_qv: bool = False
    want_limit: bool = False
    keep_error_path: bool = False


@dataclass
class CoarseResult:
    n: int
    m_ratio: int
    err_T: np.ndarray                  # (R, d) normalized error at T
    sup_err: np.ndarray               # (R,) sup over the coarse grid of |fine - coarse|
    limit_err_T: np.ndarray | None = None        # (R, d)
    qv_T: np.ndarray | None = None            # (R, d, d)
    qv_pred_T: np.ndarray | None = None       # (R, d, d)
    mixed_T: np.ndarray | None = None         # (R, d)
    qv_curve_mean: np.ndarray | None = None   # (n+1, d, d) ensemble mean
    mixed_curve_mean: np.ndarray | None = None
    pred_curve_mean: np.ndarray | None = None
    error_path: np.ndarray | None = None         # (R, n+1, d) when requested


@dataclass
class EnsembleResult:
    model_name: str
    params: KernelParams
    n_fine: int
    replications: int
    master_seed: int
    x_T: np.ndarray                   # (R, d) fine reference at T
    w_T: np.ndarray                   # (R, m) terminal Brownian values
    coarse: dict[int, CoarseResult] = field(default_factory=dict)


_factor_cache: dict[tuple[float, float, int], np.ndarray] = {}


def _fine_factor(p: KernelParams, n: int) -> np.ndarray:
    key = (p.H, p.T, n)
    if key not in _factor_cache:
        if len(_factor_cache) > 4:
            _factor_cache.clear()
        _factor_cache[key] = factorize(build_covariance(p, n)).factor
    return _factor_cache[key]


def _chunk_plan(n: int) -> list[tuple[int, int, int]]:
    """(first step, last step + 1, draw width) for each fixed-size chunk."""
    plan = []
    for k0 in range(1, n + 1, Z_CHUNK):
        k1 = min(k0 + Z_CHUNK, n + 1)
        plan.append((k0, k1, n - k0 + 2))
    return plan


def _chunk_draws(seed: int, reps: range, comp: int, chunk_ordinal: int,
                 clen: int, width: int, factor_t: np.ndarray) -> np.ndarray:
    """Draws for one chunk: (len(reps), clen, width); row k entry 0 is the
    plain increment, entries 1.. are the kernel-weighted horizons."""
    nr = len(reps)
    z = np.empty((nr, clen, width))
    for i, rep in enumerate(reps):
        gen = _stream_generator(seed, rep, comp, chunk_ordinal)
        z[i] = gen.standard_normal((clen, width))
    d = z.reshape(nr * clen, width) @ factor_t
    return d.reshape(nr, clen, width)


def _precompute_step_draws(seed: int, reps: range, comps: range, n: int,
                           factor: np.ndarray) -> np.ndarray:
    """All step draws at one resolution, shape (R, n, n+1, len(comps)).

    Row (k-1) holds step k's vector padded with zeros beyond horizon n-k+1.
    Used for the moderate-size coarse-level streams (the limit equation's
    independent noise), where holding everything in memory is cheap.
    """
    nr = len(reps)
    out = np.zeros((nr, n, n + 1, len(comps)))
    plan = _chunk_plan(n)
    for ci, comp in enumerate(comps):
        for ordinal, (k0, k1, width) in enumerate(plan):
            ft = np.ascontiguousarray(factor[:width, :width].T)
            d = _chunk_draws(seed, reps, comp, ordinal, k1 - k0, width, ft)
            for k in range(k0, k1):
                mk = n - k + 2
                out[:, k - 1, :mk, ci] = d[:, k - k0, :mk]
    return out


def _check_finite(x: np.ndarray, step: int, r0: int) -> None:
    bad = ~np.isfinite(x).all(axis=-1) | (np.abs(x).max(axis=-1) > STATE_BOUND)
    if bad.any():
        rep = r0 + int(np.argmax(bad))
        raise DivergenceError(
            f"path diverged at step {step} (replication {rep})",
            step=step, replication=rep,
        )


def _simulate_block(model: Model, p: KernelParams, n_fine: int,
                    requests: tuple[CoarseRequest, ...], r0: int, r1: int,
                    seed: int, fine_factor: np.ndarray) -> dict:
    """Simulate replications [r0, r1) and reduce them to per-rep outputs."""
    nr = r1 - r0
    reps = range(r0, r1)
    d, m = model.d, model.m
    x0 = model.X0
    nf = n_fine
    dtf = p.T / nf
    idx = np.arange(1, nf + 1, dtype=float)
    w_fine = np.zeros(nf + 1)
    w_fine[1:] = kernel_integral(p, (idx - 1.0) * dtf, idx * dtf)

    acc = np.zeros((nr, nf + 1, d))
    fine_x = np.empty((nr, nf + 1, d))
    fine_x[:, 0] = x0
    w_sum = np.zeros((nr, m))

    class _CoarseState:
        pass

    states: dict[int, _CoarseState] = {}
    for req in requests:
        if nf % req.n:
            raise ValueError(f"coarse n={req.n} must divide fine n={nf}")
        st = _CoarseState()
        st.req = req
        st.n = req.n
        st.mr = nf // req.n
        st.dtc = p.T / req.n
        cidx = np.arange(1, req.n + 1, dtype=float)
        st.w_coarse = np.zeros(req.n + 1)
        st.w_coarse[1:] = kernel_integral(p, (cidx - 1.0) * st.dtc, cidx * st.dtc)
        st.draws = np.zeros((nr, req.n, req.n + 1, m))
        st.acc = np.zeros((nr, req.n + 1, d))
        st.x = np.empty((nr, req.n + 1, d))
        st.x[:, 0] = x0
        st.bc = model.b(np.broadcast_to(x0, (nr, d)))
        st.sc = model.sigma(np.broadcast_to(x0, (nr, d)))
        if req.want_qv:
            st.bet_acc = np.zeros((nr, nf + 1, d))
            st.vbuf = np.empty((nr, st.mr, d))
            st.cell_w = np.ones(st.mr)
            st.cell_w[-1] = 0.5
            st.qv_run = np.zeros((nr, d, d))
            st.mixed_run = np.zeros((nr, d))
            st.qv_curve = np.zeros((req.n + 1, d, d))
            st.mixed_curve = np.zeros((req.n + 1, d))
        states[req.n] = st

    plan = _chunk_plan(nf)
    draw_chunks = [None] * m
    for ordinal, (k0, k1, width) in enumerate(plan):
        ft = np.ascontiguousarray(fine_factor[:width, :width].T)
        for j in range(m):
            draw_chunks[j] = _chunk_draws(seed, reps, j, ordinal, k1 - k0, width, ft)
        for k in range(k0, k1):
            o = k - k0
            mk = nf - k + 2
            x_prev = fine_x[:, k - 1]
            bv = model.b(x_prev)
            sv = model.sigma(x_prev)
            acc[:, k:] += bv[:, None, :] * w_fine[1:mk, None]
            for j in range(m):
                dj = draw_chunks[j]
                acc[:, k:] += sv[:, :, j][:, None, :] * dj[:, o, 1:mk, None]
                w_sum[:, j] += dj[:, o, 0]
            fine_x[:, k] = x0 + acc[:, k]

            for st in states.values():
                c = (k - 1) // st.mr  # 0-based coarse cell containing this step
                nh = st.n - c  # horizons of coarse step c+1
                q = (c + np.arange(1, nh + 1)) * st.mr - k + 1
                for j in range(m):
                    dj = draw_chunks[j]
                    st.draws[:, c, 1:nh + 1, j] += dj[:, o, q]
                    st.draws[:, c, 0, j] += dj[:, o, 0]
                if st.req.want_qv:
                    st.bet_acc[:, k:] += st.bc[:, None, :] * w_fine[1:mk, None]
                    for j in range(m):
                        st.bet_acc[:, k:] += (
                            st.sc[:, :, j][:, None, :] * draw_chunks[j][:, o, 1:mk, None]
                        )
                    st.vbuf[:, (k - 1) % st.mr] = (
                        x0 + st.bet_acc[:, k] - st.x[:, c]
                    )
                if k % st.mr == 0:
                    kc = k // st.mr
                    nh2 = st.n - kc + 1
                    st.acc[:, kc:] += st.bc[:, None, :] * st.w_coarse[1:nh2 + 1, None]
                    for j in range(m):
                        st.acc[:, kc:] += (
                            st.sc[:, :, j][:, None, :]
                            * st.draws[:, kc - 1, 1:nh2 + 1, j][:, :, None]
                        )
                    st.x[:, kc] = x0 + st.acc[:, kc]
                    if st.req.want_qv:
                        st.qv_run += st.dtc / st.mr * np.einsum(
                            "q,rqi,rqj->rij", st.cell_w, st.vbuf, st.vbuf
                        )
                        st.mixed_run += st.dtc / st.mr * np.einsum(
                            "q,rqi->ri", st.cell_w, st.vbuf
                        )
                        st.qv_curve[kc] += st.qv_run.sum(axis=0)
                        st.mixed_curve[kc] += st.mixed_run.sum(axis=0)
                    st.bc = model.b(st.x[:, kc])
                    st.sc = model.sigma(st.x[:, kc])
            if k % 64 == 0 or k == nf:
                _check_finite(fine_x[:, k], k, r0)

    out = {"x_T": fine_x[:, nf].copy(), "w_T": w_sum, "coarse": {}}
    for st in states.values():
        res: dict = {}
        ref = fine_x[:, ::st.mr]  # (nr, n+1, d), fine path on the coarse grid
        diff = ref - st.x
        scale_u = st.dtc ** (-p.H)
        res["err_T"] = scale_u * diff[:, st.n].copy()
        res["sup_err"] = np.linalg.norm(diff, axis=2).max(axis=1)
        if st.req.keep_error_path:
            res["error_path"] = scale_u * diff
        if st.req.want_qv:
            scale_qv = st.dtc ** (-2.0 * p.H)
            res["qv_T"] = scale_qv * st.qv_run
            res["mixed_T"] = scale_u * st.mixed_run
            res["qv_curve_sum"] = scale_qv * st.qv_curve
            res["mixed_curve_sum"] = scale_u * st.mixed_curve
            sig = model.sigma(fine_x)  # (nr, nf+1, d, m)
            sst = np.einsum("rqil,rqjl->rqij", sig, sig)
            cs = np.cumsum(sst, axis=1)
            grid = np.arange(0, nf + 1, st.mr)
            ct = dtf * (cs[:, grid] - 0.5 * (sst[:, grid] + sst[:, :1]))
            ct[:, 0] = 0.0
            res["qv_pred_T"] = p.c_limit * ct[:, -1]
            res["pred_curve_sum"] = p.c_limit * ct.sum(axis=0)
        if st.req.want_limit:
            res["limit_err_T"] = _limit_block(
                model, p, st, ref, seed, reps
            )
        out["coarse"][st.n] = res
    return out


def _limit_block(model: Model, p: KernelParams, st, ref: np.ndarray,
                 seed: int, reps: range) -> np.ndarray:
    """Run the limiting error recursion on one coarse grid.

    Drift and diffusion are the Jacobians of the model frozen at the
    reference path; the extra noise channel uses independent kernel-weighted
    draws (component namespace after the driving components), scaled by C_H.
    """
    nr = len(reps)
    d, m = model.d, model.m
    n = st.n
    coarse_factor = _fine_factor(p, n)
    b_draws = _precompute_step_draws(
        seed, reps, range(m, m + m * m), n, coarse_factor
    )
    acc = np.zeros((nr, n + 1, d))
    for kc in range(1, n + 1):
        x = ref[:, kc - 1]
        u = acc[:, kc - 1] if kc > 1 else np.zeros((nr, d))
        gb = model.grad_b(x)          # (nr, d, d)
        gs = model.grad_sigma(x)      # (nr, d, m, d)
        sg = model.sigma(x)           # (nr, d, m)
        nh = n - kc + 1
        drift = np.einsum("rik,rk->ri", gb, u)
        acc[:, kc:] += drift[:, None, :] * st.w_coarse[1:nh + 1, None]
        for j in range(m):
            gs_u = np.einsum("rik,rk->ri", gs[:, :, j, :], u)
            acc[:, kc:] += gs_u[:, None, :] * st.draws[:, kc - 1, 1:nh + 1, j][:, :, None]
            for l in range(m):
                load = np.einsum("rik,rk->ri", gs[:, :, j, :], sg[:, :, l])
                acc[:, kc:] -= (
                    p.C_H * load[:, None, :]
                    * b_draws[:, kc - 1, 1:nh + 1, l * m + j][:, :, None]
                )
    return acc[:, n].copy()


def _block_task(args) -> tuple[int, dict]:
    (model_name, overrides, H, T, n_fine, requests, r0, r1, seed) = args
    model = get_model(model_name, **(overrides or {}))
    p = KernelParams(H=H, T=T)
    factor = _fine_factor(p, n_fine)
    return r0, _simulate_block(model, p, n_fine, requests, r0, r1, seed, factor)


def run_coupled_ensemble(model: Model | str, p: KernelParams, n_fine: int,
                         requests: list[CoarseRequest] | tuple[CoarseRequest, ...],
                         replications: int, master_seed: int, *,
                         model_overrides: dict | None = None,
                         workers: int = 1) -> EnsembleResult:
    """Simulate an ensemble of coupled runs and reduce to per-rep outputs.

    ``requests`` lists the coarse resolutions (each must divide ``n_fine``)
    with flags for the quadratic-variation functionals and the limiting
    error equation.  Work is split into fixed blocks of ``R_BLOCK``
    replications; with ``workers > 1`` blocks run in separate processes
    (requires ``model`` given by name) and results are identical to the
    single-process run.
    """
    if n_fine > MAX_FINE_STEPS:
        raise ResourceLimitError(
            f"fine grid {n_fine} exceeds the configured maximum {MAX_FINE_STEPS}"
        )
    if isinstance(model, str):
        model_name = model
        model_obj = get_model(model, **(model_overrides or {}))
    else:
        model_name = model.name
        model_obj = model
        if workers > 1:
            raise ValueError("workers > 1 requires a registered model name")
    requests = tuple(requests)
    seen = set()
    for req in requests:
        if req.n in seen:
            raise ValueError(f"duplicate coarse resolution {req.n}")
        seen.add(req.n)

    R = replications
    d, m = model_obj.d, model_obj.m
    result = EnsembleResult(
        model_name=model_name, params=p, n_fine=n_fine, replications=R,
        master_seed=master_seed,
        x_T=np.empty((R, d)), w_T=np.empty((R, m)),
    )
    for req in requests:
        cr = CoarseResult(
            n=req.n, m_ratio=n_fine // req.n,
            err_T=np.empty((R, d)), sup_err=np.empty(R),
        )
        if req.want_limit:
            cr.limit_err_T = np.empty((R, d))
        if req.want_qv:
            cr.qv_T = np.empty((R, d, d))
            cr.qv_pred_T = np.empty((R, d, d))
            cr.mixed_T = np.empty((R, d))
            cr.qv_curve_mean = np.zeros((req.n + 1, d, d))
            cr.mixed_curve_mean = np.zeros((req.n + 1, d))
            cr.pred_curve_mean = np.zeros((req.n + 1, d, d))
        if req.keep_error_path:
            cr.error_path = np.empty((R, req.n + 1, d))
        result.coarse[req.n] = cr

    blocks = [(r0, min(r0 + R_BLOCK, R)) for r0 in range(0, R, R_BLOCK)]

    def _insert(r0: int, out: dict) -> None:
        r1 = r0 + out["x_T"].shape[0]
        result.x_T[r0:r1] = out["x_T"]
        result.w_T[r0:r1] = out["w_T"]
        for n, res in out["coarse"].items():
            cr = result.coarse[n]
            cr.err_T[r0:r1] = res["err_T"]
            cr.sup_err[r0:r1] = res["sup_err"]
            if "limit_err_T" in res:
                cr.limit_err_T[r0:r1] = res["limit_err_T"]
            if "qv_T" in res:
                cr.qv_T[r0:r1] = res["qv_T"]
                cr.qv_pred_T[r0:r1] = res["qv_pred_T"]
                cr.mixed_T[r0:r1] = res["mixed_T"]
                cr.qv_curve_mean += res["qv_curve_sum"]
                cr.mixed_curve_mean += res["mixed_curve_sum"]
                cr.pred_curve_mean += res["pred_curve_sum"]
            if "error_path" in res:
                cr.error_path[r0:r1] = res["error_path"]

    if workers <= 1:
        factor = _fine_factor(p, n_fine)
        for r0, r1 in blocks:
            _insert(r0, _simulate_block(
                model_obj, p, n_fine, requests, r0, r1, master_seed, factor
            ))
    else:
        args = [
            (model_name, model_overrides, p.H, p.T, n_fine, requests, r0, r1,
             master_seed)
            for r0, r1 in blocks
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for r0, out in pool.map(_block_task, args):
                _insert(r0, out)

    for req in requests:
        cr = result.coarse[req.n]
        if req.want_qv:
            cr.qv_curve_mean /= R
            cr.mixed_curve_mean /= R
            cr.pred_curve_mean /= R
    return result


def sample_brownian_with_kernel_integral(
    p: KernelParams, n: int, replications: int, master_seed: int,
    component: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Joint draw of a Brownian grid path and int_0^T K(T-s) dW_s, exactly.

    Per step the pair (plain increment, kernel-weighted increment at horizon
    T) is bivariate Gaussian with moments in closed form, so the exact
    stochastic integral is the sum of per-step horizon-matched draws coupled
    to the returned path.  Returns (paths (R, n+1), integrals (R,)).
    """
    dt = p.T / n
    R = replications
    paths = np.zeros((R, n + 1))
    integrals = np.zeros(R)
    from .kernel import kernel_square_integral

    for k in range(1, n + 1):
        a = p.T - k * dt
        b = p.T - (k - 1) * dt
        var_i = kernel_square_integral(p, a, b)
        cov = kernel_integral(p, a, b)
        resid = max(var_i - cov * cov / dt, 0.0)
        z = np.empty((R, 2))
        for rep in range(R):
            gen = _stream_generator(master_seed, rep, component, k)
            z[rep] = gen.standard_normal(2)
        dw = np.sqrt(dt) * z[:, 0]
        paths[:, k] = paths[:, k - 1] + dw
        integrals += (cov / dt) * dw + np.sqrt(resid) * z[:, 1]
    return paths, integrals
