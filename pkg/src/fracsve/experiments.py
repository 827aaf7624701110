"""Reproducible experiment drivers behind the command-line interface.

Every experiment consumes an :class:`ExperimentConfig`, runs a fixed
computation keyed only by the config and the master seed, and returns an
:class:`ExperimentOutcome` whose ``results`` dictionary is bit-reproducible
(no timings, no environment state).  The CLI persists three artifacts per
run: manifest.json (config, seed, version, wall time), results.json (the
deterministic outcome), and CSV data tables.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    deterministic_qv_limit,
    fractional_parts_integral,
    marchaud_derivative,
)
from .engine import (
    CoarseRequest,
    run_coupled_ensemble,
    sample_brownian_with_kernel_integral,
)
from .errors import ConfigError
from .gaussian import (StreamKey, build_covariance, factorize,
                       low_rank_project, sample_step)
from .kernel import (
    KernelParams,
    QuadratureConfig,
    _quad,
    identity_residual,
    kernel_integral,
    kernel_square_integral,
    kernel_value,
    power_increment,
)
from .limitlaw import compare_distributions
from .mcstats import rate_regression
from .models import MODEL_NAMES, get_model, model_table
from .scheme import (
    sample_path_draws,
    sample_path_draws_per_step,
    simulate_coupled,
    simulate_euler,
    simulate_path,
    write_path_csv,
)

EXPERIMENTS = (
    "kernel-check",
    "qv-limit",
    "strong-rate",
    "limit-law",
    "marchaud-check",
    "fracparts-check",
    "simulate",
)

_H_DEFAULTS = {
    "kernel-check": (0.05, 0.1, 0.25, 0.4, 0.5),
    "qv-limit": (0.1, 0.25, 0.4, 0.5),
    "strong-rate": (0.25, 0.4),
    "limit-law": (0.25,),
    "marchaud-check": (0.1, 0.25, 0.4),
    "fracparts-check": (0.25,),
    "simulate": (0.25,),
}

_N_DEFAULTS = {
    "qv-limit": (64, 128, 256, 512),
    "strong-rate": (16, 32, 64, 128),
    "limit-law": (256,),
    "fracparts-check": (64, 256, 1024),
    "simulate": (64,),
    "kernel-check": (),
    "marchaud-check": (),
}

_REPS_DEFAULTS = {
    "qv-limit": 2048,
    "strong-rate": 1024,
    "limit-law": 4096,
    "marchaud-check": 256,
    "simulate": 100000,
    "kernel-check": 1,
    "fracparts-check": 1,
}


@dataclass
class ExperimentConfig:
    """Flat, file-serializable description of one experiment run."""

    experiment: str
    H: tuple[float, ...] = ()
    T: float = 1.0
    n: tuple[int, ...] = ()
    m_ratio: int = 8
    n_ref: int = 1024
    model: tuple[str, ...] = ()
    replications: int = 0
    seed: int = 1
    out: str = "runs"
    rank: int | None = None
    mode: str = ""
    cells: int = 4096
    h_stochastic: tuple[float, ...] = (0.25, 0.4)
    workers: int = 1
    self_test: bool = False
    scheme: str = "exact"
    quad_abs_tol: float = 1e-12
    quad_rel_tol: float = 1e-10
    quad_max_subdivisions: int = 200
    quad_tail_cutoff: float = 1e6

    def normalized(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"experiment must be one of {', '.join(EXPERIMENTS)}; "
                f"got {self.experiment!r}"
            )
        cfg = ExperimentConfig(**{f.name: getattr(self, f.name) for f in fields(self)})
        if not cfg.H:
            cfg.H = _H_DEFAULTS[cfg.experiment]
        if not cfg.n:
            cfg.n = _N_DEFAULTS[cfg.experiment]
        if not cfg.replications:
            cfg.replications = _REPS_DEFAULTS[cfg.experiment]
        if not cfg.model:
            cfg.model = {
                "strong-rate": ("linear", "trig"),
                "qv-limit": ("trig",),
                "limit-law": ("trig",),
                "simulate": ("trig",),
            }.get(cfg.experiment, ())
        if not cfg.mode:
            cfg.mode = "deterministic" if cfg.experiment == "qv-limit" else ""
        if cfg.experiment == "qv-limit" and cfg.mode == "mc" \
                and cfg.n == _N_DEFAULTS["qv-limit"]:
            cfg.n = (64, 128, 256)
        for h in cfg.H + cfg.h_stochastic:
            if not 0.0 < h <= 0.5:
                raise ConfigError(f"H values must lie in (0, 1/2]; got {h}")
        if cfg.T <= 0:
            raise ConfigError("T must be positive")
        if cfg.replications < 1:
            raise ConfigError("replications must be >= 1")
        if cfg.seed < 0 or cfg.seed >= 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if cfg.workers < 1:
            raise ConfigError("workers must be >= 1")
        if cfg.m_ratio < 1:
            raise ConfigError("m_ratio must be >= 1")
        for name in cfg.model:
            if name not in MODEL_NAMES:
                raise ConfigError(
                    f"unknown model {name!r}; available: {', '.join(MODEL_NAMES)}"
                )
        if cfg.experiment == "qv-limit" and cfg.mode not in ("deterministic", "mc"):
            raise ConfigError("qv-limit mode must be 'deterministic' or 'mc'")
        if cfg.scheme not in ("exact", "euler"):
            raise ConfigError("scheme must be 'exact' or 'euler'")
        try:
            cfg.quadrature()
        except ValueError as exc:
            raise ConfigError(f"invalid quadrature override: {exc}") from exc
        return cfg

    def quadrature(self) -> QuadratureConfig:
        return QuadratureConfig(
            abs_tol=self.quad_abs_tol, rel_tol=self.quad_rel_tol,
            max_subdivisions=self.quad_max_subdivisions,
            tail_cutoff=self.quad_tail_cutoff,
        )

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


def parse_config_file(path: str | Path) -> dict:
    """Parse a flat ``key = value`` config file ('#' starts a comment)."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key] = val.strip()
    return values


def config_from_mapping(raw: dict) -> ExperimentConfig:
    """Build a config from string-or-typed values (file or CLI namespace)."""
    def as_floats(v):
        if isinstance(v, (tuple, list)):
            return tuple(float(x) for x in v)
        return tuple(float(x) for x in str(v).split(",") if str(x).strip())

    def as_ints(v):
        if isinstance(v, (tuple, list)):
            return tuple(int(x) for x in v)
        return tuple(int(x) for x in str(v).split(",") if str(x).strip())

    def as_names(v):
        if isinstance(v, (tuple, list)):
            return tuple(str(x) for x in v)
        return tuple(s.strip() for s in str(v).split(",") if s.strip())

    def as_bool(v):
        if isinstance(v, bool):
            return v
        return str(v).strip().lower() in ("1", "true", "yes", "on")

    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "experiment" not in raw or not raw["experiment"]:
        raise ConfigError("config must set 'experiment'")
    kw: dict = {"experiment": str(raw["experiment"])}
    try:
        if "H" in raw:
            kw["H"] = as_floats(raw["H"])
        if "h_stochastic" in raw:
            kw["h_stochastic"] = as_floats(raw["h_stochastic"])
        if "n" in raw:
            kw["n"] = as_ints(raw["n"])
        if "model" in raw:
            kw["model"] = as_names(raw["model"])
        for key, cast in (("T", float), ("m_ratio", int), ("n_ref", int),
                          ("replications", int), ("seed", int), ("cells", int),
                          ("workers", int), ("rank", int),
                          ("quad_abs_tol", float), ("quad_rel_tol", float),
                          ("quad_max_subdivisions", int),
                          ("quad_tail_cutoff", float)):
            if key in raw and raw[key] is not None and raw[key] != "":
                kw[key] = cast(raw[key])
        for key in ("out", "mode", "scheme"):
            if key in raw and raw[key]:
                kw[key] = str(raw[key])
        if "self_test" in raw:
            kw["self_test"] = as_bool(raw["self_test"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    return ExperimentConfig(**kw).normalized()


@dataclass
class ExperimentOutcome:
    """Deterministic results plus pass/fail flags for each criterion."""

    results: dict
    criteria: list[dict] = field(default_factory=list)
    tables: dict[str, tuple[list[str], list[list[float]]]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.criteria)

    def add_criterion(self, name: str, passed: bool, **details) -> None:
        self.criteria.append({"name": name, "passed": bool(passed), **details})


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


def write_table_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(
                repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
                for v in row
            ) + "\n")


# ---------------------------------------------------------------------------
# kernel-check


def run_kernel_check(cfg: ExperimentConfig) -> ExperimentOutcome:
    """Closed-form vs quadrature agreement and the variance-constant identity."""
    out = ExperimentOutcome(results={"experiment": cfg.experiment, "per_H": []})
    qcfg = cfg.quadrature()
    worst_resid = 0.0
    worst_quad = 0.0
    for H in cfg.H:
        p = KernelParams(H=H, T=cfg.T)
        resid = identity_residual(p, qcfg)
        # adaptive-quadrature cross-checks of the closed forms
        spans = [(0.0, 1.0), (0.0, 0.37), (0.2, 1.3)]
        qerr = 0.0
        for a, b in spans:
            closed = kernel_integral(p, a, b)
            closed2 = kernel_square_integral(p, a, b)
            if a == 0.0:
                g = math.sqrt(p.G)
                quad1 = _quad(lambda u: 1.0 / g, a, b, qcfg,
                              weight="alg", wvar=(H - 0.5, 0.0))
                quad2 = _quad(lambda u: 1.0 / p.G, a, b, qcfg,
                              weight="alg", wvar=(2.0 * H - 1.0, 0.0))
            else:
                quad1 = _quad(lambda u: kernel_value(p, u), a, b, qcfg)
                quad2 = _quad(lambda u: kernel_value(p, u) ** 2, a, b, qcfg)
            qerr = max(qerr, abs(quad1 - closed) / closed,
                       abs(quad2 - closed2) / closed2)
        ch_sq_err = abs(p.C_H ** 2 - p.c_limit) / p.c_limit
        rec = {"H": H, "identity_residual": resid, "quad_rel_err": qerr,
               "c_limit": p.c_limit, "C_H": p.C_H, "C_H_sq_rel_err": ch_sq_err}
        if H == 0.5:
            rec["C_half_abs_err"] = abs(p.C_H - 1.0 / math.sqrt(2.0))
        out.results["per_H"].append(rec)
        worst_resid = max(worst_resid, abs(resid))
        worst_quad = max(worst_quad, qerr)
    out.add_criterion("identity_residual_below_1e-6", worst_resid < 1e-6,
                      worst=worst_resid, threshold=1e-6)
    out.add_criterion("closed_forms_match_quadrature_1e-10", worst_quad < 1e-10,
                      worst=worst_quad, threshold=1e-10)
    if 0.5 in cfg.H:
        err = abs(KernelParams(H=0.5).C_H - 1.0 / math.sqrt(2.0))
        out.add_criterion("C_half_is_inv_sqrt2_1e-12", err < 1e-12, error=err)
    out.tables["kernel_check"] = (
        ["H", "identity_residual", "quad_rel_err", "c_limit", "C_H"],
        [[r["H"], r["identity_residual"], r["quad_rel_err"], r["c_limit"], r["C_H"]]
         for r in out.results["per_H"]],
    )
    return out


# ---------------------------------------------------------------------------
# qv-limit


def run_qv_limit(cfg: ExperimentConfig) -> ExperimentOutcome:
    if cfg.mode == "deterministic":
        return _qv_limit_deterministic(cfg)
    return _qv_limit_mc(cfg)


def _qv_limit_deterministic(cfg: ExperimentConfig) -> ExperimentOutcome:
    """Convergence of the closed QV functional to c_limit * t."""
    out = ExperimentOutcome(results={"experiment": cfg.experiment,
                                     "mode": "deterministic", "per_H": []})
    t = 1.0
    rows = []
    for H in cfg.H:
        p = KernelParams(H=H, T=cfg.T)
        target = p.c_limit * t
        vals = [deterministic_qv_limit(p, n, t, cfg.quadrature()) for n in cfg.n]
        errs = [abs(v - target) for v in vals]
        rel = [e / target for e in errs]
        rec = {"H": H, "target": target, "n": list(cfg.n), "values": vals,
               "abs_err": errs, "rel_err": rel}
        out.results["per_H"].append(rec)
        for n, v, r in zip(cfg.n, vals, rel):
            rows.append([H, n, v, target, r])
        if H == 0.5:
            out.add_criterion("H=0.5_exact_1e-12", max(rel) < 1e-12, worst=max(rel))
        else:
            decreasing = all(errs[i + 1] < errs[i] for i in range(len(errs) - 1))
            out.add_criterion(f"H={H}_error_strictly_decreasing", decreasing,
                              abs_err=errs)
            out.add_criterion(f"H={H}_rel_err_final_below_2pct", rel[-1] < 0.02,
                              rel_err=rel[-1], threshold=0.02)
    out.tables["qv_deterministic"] = (
        ["H", "n", "D_n", "c_limit_t", "rel_err"], rows)
    return out


def _qv_limit_mc(cfg: ExperimentConfig) -> ExperimentOutcome:
    """Monte Carlo QV of coupled runs against the path-predicted limit."""
    out = ExperimentOutcome(results={"experiment": cfg.experiment, "mode": "mc",
                                     "per_n": []})
    model = cfg.model[0]
    H = cfg.H[0]
    p = KernelParams(H=H, T=cfg.T)
    R = cfg.replications
    mixed_means = []
    curve_rows = []
    for n in cfg.n:
        res = run_coupled_ensemble(model, p, n * cfg.m_ratio,
                                   [CoarseRequest(n, want_qv=True)], R, cfg.seed,
                                   workers=cfg.workers)
        cr = res.coarse[n]
        qv = np.einsum("rii->r", cr.qv_T) / model_dim(model)
        pred = np.einsum("rii->r", cr.qv_pred_T) / model_dim(model)
        diff = qv - pred
        se_qv = qv.std(ddof=1) / math.sqrt(R)
        se_diff = diff.std(ddof=1) / math.sqrt(R)
        mixed_abs = np.abs(cr.mixed_T).mean(axis=0).max()
        mixed_means.append(float(mixed_abs))
        rec = {
            "n": n, "m_ratio": cfg.m_ratio, "replications": R,
            "qv_mean": float(qv.mean()), "qv_se": float(se_qv),
            "pred_mean": float(pred.mean()),
            "diff_mean": float(diff.mean()), "diff_se": float(se_diff),
            "z_unpaired": float(diff.mean() / se_qv),
            "z_paired": float(diff.mean() / se_diff),
            "mixed_abs_mean": float(mixed_abs),
        }
        out.results["per_n"].append(rec)
        for k, tk in enumerate(np.linspace(0.0, cfg.T, n + 1)):
            curve_rows.append([n, tk, float(cr.qv_curve_mean[k, 0, 0]),
                               float(cr.pred_curve_mean[k, 0, 0]),
                               float(cr.mixed_curve_mean[k, 0])])
    final = out.results["per_n"][-1]
    out.add_criterion(
        "qv_mean_within_4se_of_predicted",
        abs(final["z_unpaired"]) < 4.0,
        z=final["z_unpaired"], z_paired=final["z_paired"], n=final["n"],
    )
    decreasing = all(mixed_means[i + 1] < mixed_means[i]
                     for i in range(len(mixed_means) - 1))
    out.add_criterion("mixed_qv_mean_decreasing_in_n", decreasing,
                      values=mixed_means, n=list(cfg.n))
    out.tables["qv_curves"] = (["n", "t", "qv_mean", "predicted_mean", "mixed_mean"],
                               curve_rows)
    return out


def model_dim(name: str) -> int:
    return get_model(name).d


# ---------------------------------------------------------------------------
# strong-rate


def run_strong_rate(cfg: ExperimentConfig) -> ExperimentOutcome:
    """Empirical strong convergence rate against a fixed fine reference.

    The per-resolution error metric is the grid maximum of the per-time RMS
    error (the uniform-in-time moment rate); the RMS of the pathwise grid
    maximum is reported alongside as a diagnostic.
    """
    out = ExperimentOutcome(results={"experiment": cfg.experiment, "combos": []})
    rows = []
    for name in cfg.model:
        for H in cfg.H:
            p = KernelParams(H=H, T=cfg.T)
            reqs = [CoarseRequest(n, keep_error_path=True) for n in cfg.n]
            res = run_coupled_ensemble(name, p, cfg.n_ref, reqs,
                                       cfg.replications, cfg.seed,
                                       workers=cfg.workers)
            sup_rms, rms_sup = [], []
            for n in cfg.n:
                cr = res.coarse[n]
                err = (cfg.T / n) ** H * cr.error_path  # undo normalization
                norms = np.linalg.norm(err, axis=2)
                sup_rms.append(float(np.sqrt((norms ** 2).mean(axis=0)).max()))
                rms_sup.append(float(np.sqrt((norms.max(axis=1) ** 2).mean())))
            fit = rate_regression(list(zip(cfg.n, sup_rms)))
            fit_sup = rate_regression(list(zip(cfg.n, rms_sup)))
            rec = {
                "model": name, "H": H, "n": list(cfg.n), "n_ref": cfg.n_ref,
                "sup_rms": sup_rms, "rms_sup": rms_sup,
                "slope": fit.slope, "r_squared": fit.r_squared,
                "slope_rms_sup": fit_sup.slope,
                "r_squared_rms_sup": fit_sup.r_squared,
            }
            out.results["combos"].append(rec)
            ok = abs(fit.slope + H) <= 0.15 and fit.r_squared > 0.95
            out.add_criterion(
                f"rate_{name}_H={H}", ok,
                slope=fit.slope, expected=-H, tolerance=0.15,
                r_squared=fit.r_squared,
            )
            for n, e1, e2 in zip(cfg.n, sup_rms, rms_sup):
                rows.append([name_code(name), H, n, e1, e2])
    out.tables["rate_table"] = (
        ["model_code", "H", "n", "sup_rms_error", "rms_sup_error"], rows)
    return out


def name_code(name: str) -> int:
    return list(MODEL_NAMES).index(name)


# ---------------------------------------------------------------------------
# limit-law


def run_limit_law(cfg: ExperimentConfig) -> ExperimentOutcome:
    """Distributional comparison of the scaled error against its limit law."""
    out = ExperimentOutcome(results={"experiment": cfg.experiment})
    model = cfg.model[0]
    H = cfg.H[0]
    n = cfg.n[0]
    p = KernelParams(H=H, T=cfg.T)
    reqs = [CoarseRequest(n, want_limit=True)]
    if cfg.m_ratio % 2 == 0 and cfg.m_ratio >= 2:
        reqs.append(CoarseRequest(2 * n, want_limit=True))  # resolution sensitivity
    res = run_coupled_ensemble(model, p, n * cfg.m_ratio, reqs,
                               cfg.replications, cfg.seed, workers=cfg.workers)
    cr = res.coarse[n]
    report = compare_distributions(cr.err_T, cr.limit_err_T, res.w_T)
    out.results["comparison"] = report.to_dict()
    out.results["config"] = {"model": model, "H": H, "n": n,
                             "m_ratio": cfg.m_ratio,
                             "replications": cfg.replications}
    if 2 * n in res.coarse:
        cr2 = res.coarse[2 * n]
        out.results["sensitivity_2n"] = {
            "n": 2 * n,
            "var_scheme": float(cr2.err_T.var(ddof=1, axis=0)[0]),
            "var_limit": float(cr2.limit_err_T.var(ddof=1, axis=0)[0]),
        }

    ks_min_p = min(k["p_value"] for k in report.ks)
    out.add_criterion("variance_cis_overlap", report.variance_cis_overlap(),
                      scheme_var=report.scheme["var"], limit_var=report.limit["var"],
                      scheme_ci=report.scheme["var_ci"], limit_ci=report.limit["var_ci"])
    out.add_criterion("ks_p_above_0.01", ks_min_p > 0.01, p=ks_min_p)
    out.add_criterion("stable_cov_diagnostic_overlap",
                      bool(report.cov_diagnostic_overlaps()),
                      cov_scheme=report.cov_w_scheme, cov_limit=report.cov_w_limit)

    # constant-coefficient control: both processes vanish
    ctrl = run_coupled_ensemble("const", p, n * cfg.m_ratio,
                                [CoarseRequest(n, want_limit=True)],
                                min(64, cfg.replications), cfg.seed,
                                workers=cfg.workers)
    ctrl_err = float(np.abs(ctrl.coarse[n].err_T).max())
    ctrl_lim = float(np.abs(ctrl.coarse[n].limit_err_T).max())
    out.results["control"] = {"max_abs_scaled_error": ctrl_err,
                              "max_abs_limit": ctrl_lim}
    out.add_criterion("constant_coefficient_control_vanishes",
                      ctrl_lim == 0.0 and ctrl_err < 1e-11,
                      max_scaled_error=ctrl_err, max_limit=ctrl_lim)
    out.tables["terminal_samples"] = (
        ["scaled_error_T", "limit_T", "w_T"],
        [[float(a), float(b), float(c)] for a, b, c in
         zip(cr.err_T[:, 0], cr.limit_err_T[:, 0], res.w_T[:, 0])],
    )
    return out


# ---------------------------------------------------------------------------
# marchaud-check


def run_marchaud_check(cfg: ExperimentConfig) -> ExperimentOutcome:
    """Fractional-derivative identities and the stochastic representation."""
    out = ExperimentOutcome(results={"experiment": cfg.experiment,
                                     "affine": [], "stochastic": []})
    M = cfg.cells
    times = np.linspace(0.0, cfg.T, M + 1)
    worst_affine = 0.0
    for H in cfg.H:
        p = KernelParams(H=H, T=cfg.T)
        val = marchaud_derivative(times.copy(), times, p)
        exact = kernel_integral(p, 0.0, cfg.T)
        rel = abs(val - exact) / exact
        worst_affine = max(worst_affine, rel)
        out.results["affine"].append({"H": H, "value": float(val),
                                      "exact": float(exact), "rel_err": float(rel)})
    out.add_criterion("affine_within_1e-4", worst_affine < 1e-4,
                      worst=worst_affine, cells=M)

    p_half = KernelParams(H=0.5, T=cfg.T)
    bumpy = np.sin(3.0 * times) * times
    ident = marchaud_derivative(bumpy, times, p_half)
    ident_err = abs(ident - bumpy[-1])
    out.add_criterion("H=0.5_identity_exact", ident_err == 0.0, error=float(ident_err))

    worst_rms = 0.0
    for H in cfg.h_stochastic:
        p = KernelParams(H=H, T=cfg.T)
        paths, exact = sample_brownian_with_kernel_integral(
            p, M, cfg.replications, cfg.seed)
        est = marchaud_derivative(paths, times, p)
        rel_rms = float(np.sqrt(((est - exact) ** 2).mean() / (exact ** 2).mean()))
        floor = _representation_noise_floor(p, M)
        out.results["stochastic"].append({
            "H": H, "replications": cfg.replications, "cells": M,
            "rel_rms": rel_rms, "information_floor": floor,
        })
        worst_rms = max(worst_rms, rel_rms)
    out.add_criterion("stochastic_representation_rel_rms_below_5pct",
                      worst_rms < 0.05, worst=worst_rms,
                      H=list(cfg.h_stochastic))
    out.tables["marchaud_affine"] = (
        ["H", "value", "exact", "rel_err"],
        [[r["H"], r["value"], r["exact"], r["rel_err"]]
         for r in out.results["affine"]],
    )
    out.tables["marchaud_stochastic"] = (
        ["H", "rel_rms", "information_floor", "cells", "replications"],
        [[r["H"], r["rel_rms"], r["information_floor"], r["cells"],
          r["replications"]] for r in out.results["stochastic"]],
    )
    return out


def _representation_noise_floor(p: KernelParams, M: int) -> float:
    """Exact relative RMS of the grid representation of the kernel integral.

    The grid estimator is linear in the Brownian samples and equals the
    conditional mean given the grid, so its error is the bridge-information
    gap; everything reduces to closed-form Gaussian covariances.
    """
    times = np.linspace(0.0, p.T, M + 1)
    basis = np.zeros((M, M + 1))
    basis[np.arange(M), np.arange(1, M + 1)] = 1.0
    c = marchaud_derivative(basis, times, p)
    t = times[1:]
    s_mat = np.minimum.outer(t, t)
    kvec = kernel_integral(p, p.T - t, p.T)
    v = kernel_square_integral(p, 0.0, p.T)
    mse = float(c @ s_mat @ c - 2.0 * (c @ kvec) + v)
    return math.sqrt(max(mse, 0.0) / v)


# ---------------------------------------------------------------------------
# fracparts-check


def run_fracparts_check(cfg: ExperimentConfig) -> ExperimentOutcome:
    """Sawtooth-integral closed form and its large-n limit."""
    out = ExperimentOutcome(results={"experiment": cfg.experiment})
    H = cfg.H[0]
    p = KernelParams(H=H, T=cfg.T)
    qcfg = cfg.quadrature()

    def g(r: float) -> float:
        mu = power_increment(p, r, 1.0)
        return mu * mu

    # closed form for k == 1 at a non-grid-aligned horizon
    t_closed = 0.85
    closed_rows = []
    worst_closed = 0.0
    g_full = _quad(g, 0.0, 1.0, qcfg)
    for n in (3, 7, 64):
        val, _ = fractional_parts_integral(lambda s: 1.0, g, n, t_closed, qcfg)
        frac = n * t_closed - math.floor(n * t_closed)
        closed = (math.floor(n * t_closed) / n) * g_full
        if frac > 1e-12:
            closed += _quad(g, 0.0, frac, qcfg) / n
        err = abs(val - closed) / abs(closed)
        worst_closed = max(worst_closed, err)
        closed_rows.append([n, val, closed, err])
    out.results["closed_form"] = {"t": t_closed, "rows": closed_rows}
    out.add_criterion("unit_k_closed_form_1e-10", worst_closed < 1e-10,
                      worst=worst_closed)

    gaps = []
    for n in cfg.n:
        val, lim = fractional_parts_integral(lambda s: s, g, n, 1.0, qcfg)
        gaps.append({"n": n, "value": val, "limit": lim,
                     "abs_gap": abs(val - lim)})
    out.results["trend"] = gaps
    decreasing = all(gaps[i + 1]["abs_gap"] < gaps[i]["abs_gap"]
                     for i in range(len(gaps) - 1))
    out.add_criterion("value_approaches_limit", decreasing,
                      gaps=[gq["abs_gap"] for gq in gaps])
    out.tables["fracparts"] = (
        ["n", "value", "limit", "abs_gap"],
        [[gq["n"], gq["value"], gq["limit"], gq["abs_gap"]] for gq in gaps],
    )
    return out


# ---------------------------------------------------------------------------
# simulate


def run_simulate(cfg: ExperimentConfig, outdir: Path | None = None) -> ExperimentOutcome:
    if cfg.self_test:
        return _simulate_self_test(cfg)
    return _simulate_paths(cfg, outdir)


def _simulate_self_test(cfg: ExperimentConfig) -> ExperimentOutcome:
    """Covariance construction, factorization, and sampling-law checks."""
    out = ExperimentOutcome(results={"experiment": cfg.experiment,
                                     "self_test": True, "per_H": []})
    n = cfg.n[0]
    R = cfg.replications
    for H in cfg.H:
        p = KernelParams(H=H, T=cfg.T)
        table = build_covariance(p, n)
        fact = factorize(table)
        recon = np.linalg.norm(fact.factor @ fact.factor.T - table.entries)
        rel = float(recon / np.linalg.norm(table.entries))
        draws = np.empty((R, n + 1))
        for r in range(R):
            draws[r] = sample_step(fact, n, StreamKey(cfg.seed, r, 0, 1))
        emp = draws.T @ draws / R
        sig = table.entries
        se = np.sqrt((np.outer(np.diag(sig), np.diag(sig)) + sig ** 2) / R)
        zmax = float((np.abs(emp - sig) / se).max())
        rec = {"H": H, "n": n, "reconstruction_rel_err": rel,
               "effective_rank": fact.effective_rank,
               "regularization_used": fact.regularization_used,
               "sampling_max_z": zmax, "draws": R}
        out.results["per_H"].append(rec)
        out.add_criterion(f"H={H}_multiply_back_below_1e-8", rel < 1e-8, value=rel)
        out.add_criterion(f"H={H}_sampling_within_4se", zmax < 4.0, max_z=zmax)
        if H == 0.5:
            out.add_criterion("H=0.5_effective_rank_1", fact.effective_rank == 1,
                              rank=fact.effective_rank)
    return out


def _simulate_paths(cfg: ExperimentConfig, outdir: Path | None) -> ExperimentOutcome:
    """Simulate and persist paths (coupled when m_ratio >= 2)."""
    out = ExperimentOutcome(results={"experiment": cfg.experiment, "paths": []})
    model = get_model(cfg.model[0])
    H = cfg.H[0]
    n = cfg.n[0]
    p = KernelParams(H=H, T=cfg.T)
    reps = min(cfg.replications, 16)
    written = []
    for r in range(reps):
        if cfg.scheme == "euler":
            factor = factorize(build_covariance(p, n))
            draws = sample_path_draws(p, factor.factor, n, model.m, cfg.seed, r)
            path = simulate_euler(model, p, n, draws.plain_increments())
            rec = {"replication": r, "terminal": path.values[-1].tolist()}
            paths = {"euler": path}
        elif cfg.m_ratio >= 2:
            run = simulate_coupled(model, p, n, cfg.m_ratio, cfg.seed, r)
            rec = {"replication": r,
                   "terminal_fine": run.fine.values[-1].tolist(),
                   "terminal_coarse": run.coarse.values[-1].tolist(),
                   "scaled_error_T": run.scaled_error.values[-1].tolist()}
            paths = {"fine": run.fine, "coarse": run.coarse,
                     "scaled_error": run.scaled_error}
        else:
            if cfg.rank is not None:
                fact = low_rank_project(build_covariance(p, n), cfg.rank)
                rec_extra = {"rank": cfg.rank, "approx_error": fact.approx_error}
                draws = sample_path_draws_per_step(p, fact, n, model.m,
                                                   cfg.seed, r)
            else:
                fact = factorize(build_covariance(p, n))
                rec_extra = {}
                draws = sample_path_draws(p, fact.factor, n, model.m,
                                          cfg.seed, r)
            path = simulate_path(model, p, n, draws)
            rec = {"replication": r, "terminal": path.values[-1].tolist(),
                   **rec_extra}
            paths = {"path": path}
        out.results["paths"].append(rec)
        if outdir is not None:
            for tag, gp in paths.items():
                fn = outdir / f"path_{tag}_r{r:04d}.csv"
                write_path_csv(fn, gp)
                written.append(fn.name)
    out.results["files"] = written
    finite = all(
        np.isfinite(np.asarray(v, dtype=float)).all()
        for rec in out.results["paths"]
        for k, v in rec.items() if k.startswith("terminal")
    )
    out.add_criterion("paths_finite", finite, count=reps)
    return out


# ---------------------------------------------------------------------------
# orchestration

_RUNNERS = {
    "kernel-check": run_kernel_check,
    "qv-limit": run_qv_limit,
    "strong-rate": run_strong_rate,
    "limit-law": run_limit_law,
    "marchaud-check": run_marchaud_check,
    "fracparts-check": run_fracparts_check,
}


def run_experiment(cfg: ExperimentConfig, outdir: Path | None = None,
                   persist: bool = True) -> ExperimentOutcome:
    """Run one experiment; optionally persist manifest/results/CSV artifacts."""
    import time

    cfg = cfg.normalized()
    t0 = time.time()
    if outdir is None:
        outdir = Path(cfg.out) / cfg.experiment
    if persist:
        outdir.mkdir(parents=True, exist_ok=True)
    if cfg.experiment == "simulate":
        outcome = run_simulate(cfg, outdir if persist else None)
    else:
        outcome = _RUNNERS[cfg.experiment](cfg)
    outcome.results["criteria"] = outcome.criteria
    # out/workers affect where and how fast, never what: keep results.json
    # byte-identical across output paths and worker counts.
    echo = cfg.to_dict()
    echo.pop("out", None)
    echo.pop("workers", None)
    outcome.results["config"] = echo
    if persist:
        write_json(outdir / "results.json", outcome.results)
        manifest = {
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "version": __version__,
            "wall_time_s": time.time() - t0,
            "experiment": cfg.experiment,
            "criteria_passed": outcome.passed,
        }
        write_json(outdir / "manifest.json", manifest)
        for name, (header, rows) in outcome.tables.items():
            write_table_csv(outdir / f"{name}.csv", header, rows)
    return outcome


def list_models_text() -> str:
    lines = ["built-in models (name, d, m, X0, gradient check, notes):"]
    for row in model_table():
        check = row["gradient_check"]
        lines.append(
            f"  {row['name']:<8} d={row['d']} m={row['m']} X0={row['X0']} "
            f"bound={row['derivative_bound']} fd_dev={check:.2e}  {row['notes']}"
        )
    return "\n".join(lines)
