import math

import numpy as np
import pytest
from scipy.special import gamma

from fracsve.errors import FactorizationError
from fracsve.gaussian import (
    CovarianceTable,
    RegularizationPolicy,
    StreamKey,
    build_covariance,
    factorize,
    load_factor,
    low_rank_project,
    sample_step,
    save_factor,
)
from fracsve.kernel import (
    KernelParams,
    covariance_entry,
    kernel_integral,
    kernel_square_integral,
)


def test_build_covariance_constant_kernel():
    p = KernelParams(H=0.5, T=1.0)
    tab = build_covariance(p, 4)
    assert np.allclose(tab.entries, 0.25, rtol=0, atol=1e-15)


def test_build_covariance_n1():
    p = KernelParams(H=0.25, T=1.0)
    tab = build_covariance(p, 1)
    expect = np.array([
        [1.0, kernel_integral(p, 0.0, 1.0)],
        [kernel_integral(p, 0.0, 1.0), kernel_square_integral(p, 0.0, 1.0)],
    ])
    assert np.allclose(tab.entries, expect, rtol=1e-14)


@pytest.mark.parametrize("H", [0.05, 0.1, 0.25, 0.4, 0.5])
def test_build_covariance_matches_adaptive_entries(H):
    p = KernelParams(H=H, T=2.0)
    n = 10
    tab = build_covariance(p, n)
    assert np.array_equal(tab.entries, tab.entries.T)
    for i, j in ((1, 1), (1, 2), (1, 9), (2, 5), (7, 10)):
        ref = covariance_entry(p, i, j, tab.dt)
        assert tab.entries[i, j] == pytest.approx(ref, rel=1e-12)
    for i in range(1, n + 1):
        assert tab.entries[0, i] == pytest.approx(
            kernel_integral(p, (i - 1) * tab.dt, i * tab.dt), rel=1e-14)


@pytest.mark.parametrize("H", [0.1, 0.25, 0.5])
def test_build_covariance_psd(H):
    p = KernelParams(H=H)
    tab = build_covariance(p, 24)
    eig = np.linalg.eigvalsh(tab.entries)
    assert eig.min() >= -1e-10 * np.trace(tab.entries) / tab.n


def test_covariance_table_validation():
    bad = np.ones((3, 3))
    bad[0, 1] = 2.0
    with pytest.raises(ValueError):
        CovarianceTable(n=2, dt=0.5, entries=bad)
    with pytest.raises(ValueError):
        CovarianceTable(n=3, dt=0.5, entries=np.eye(3))


def test_factorize_rank_one_at_half():
    p = KernelParams(H=0.5, T=1.0)
    tab = build_covariance(p, 8)
    f = factorize(tab)
    assert f.effective_rank == 1
    assert f.regularization_used > 0.0  # jitter needed and recorded
    assert np.allclose(f.factor[:, 0], math.sqrt(0.125), rtol=1e-6)


def test_factorize_two_by_two_closed_form():
    p = KernelParams(H=0.25)
    tab = build_covariance(p, 1)
    f = factorize(tab)
    s = tab.entries
    l00 = math.sqrt(s[0, 0])
    l10 = s[1, 0] / l00
    l11 = math.sqrt(s[1, 1] - l10 ** 2)
    assert f.factor == pytest.approx(np.array([[l00, 0.0], [l10, l11]]), rel=1e-12)
    assert f.regularization_used == 0.0


def test_factorize_reconstruction():
    p = KernelParams(H=0.1)
    tab = build_covariance(p, 64)
    f = factorize(tab)
    err = np.linalg.norm(f.factor @ f.factor.T - tab.entries)
    assert err < 1e-8 * np.linalg.norm(tab.entries)


def test_factorize_leading_block_property():
    # the leading k x k block of the factor factorizes the leading block of
    # the (regularized) table, enabling per-step truncation
    p = KernelParams(H=0.25)
    tab = build_covariance(p, 16)
    f = factorize(tab)
    reg = tab.entries + f.regularization_used * np.eye(17)
    for k in (1, 3, 9, 17):
        blk = f.factor[:k, :k]
        assert np.allclose(blk @ blk.T, reg[:k, :k], atol=1e-12)


def test_factorize_breakdown_raises():
    ent = np.array([[1.0, 2.0], [2.0, 1.0]])  # indefinite
    tab = CovarianceTable(n=1, dt=1.0, entries=ent)
    with pytest.raises(FactorizationError) as exc:
        factorize(tab, RegularizationPolicy(jitters=(0.0, 1e-14)))
    assert exc.value.pivot_index is not None


def test_low_rank_project():
    p = KernelParams(H=0.1)
    tab = build_covariance(p, 64)
    full = low_rank_project(tab, 65)
    assert full.approx_error <= 1e-7
    r2 = low_rank_project(tab, 2)
    r4 = low_rank_project(tab, 4)
    assert r4.approx_error < r2.approx_error  # eigenvalue decay
    half = low_rank_project(build_covariance(KernelParams(H=0.5), 8), 1)
    assert half.approx_error < 1e-12  # exactly rank one
    with pytest.raises(ValueError):
        low_rank_project(tab, 0)
    with pytest.raises(ValueError):
        low_rank_project(tab, 66)


def test_sample_step_determinism_and_dims():
    p = KernelParams(H=0.25)
    f = factorize(build_covariance(p, 8))
    key = StreamKey(42, 3, 0, 5)
    a = sample_step(f, 8, key)
    b = sample_step(f, 8, key)
    assert np.array_equal(a, b)
    short = sample_step(f, 2, key)
    assert short.shape == (3,)
    with pytest.raises(ValueError):
        sample_step(f, 9, key)


def test_sample_step_truncation_consistency():
    # sampling with fewer remaining horizons uses the same marginal law:
    # with a shared key, the truncated draw is a prefix of the full draw
    p = KernelParams(H=0.25)
    f = factorize(build_covariance(p, 6))
    key = StreamKey(7, 0, 0, 1)
    full = sample_step(f, 6, key)
    short = sample_step(f, 3, key)
    # not bitwise (different z length), but the law agrees: check covariance
    R = 4000
    fulls = np.array([sample_step(f, 6, StreamKey(7, r, 0, 1)) for r in range(R)])
    shorts = np.array([sample_step(f, 3, StreamKey(9, r, 0, 1)) for r in range(R)])
    cf = fulls[:, :4].T @ fulls[:, :4] / R
    cs = shorts.T @ shorts / R
    sig = build_covariance(p, 6).entries[:4, :4]
    se = np.sqrt((np.outer(np.diag(sig), np.diag(sig)) + sig ** 2) / R)
    assert np.all(np.abs(cf - sig) < 4 * se)
    assert np.all(np.abs(cs - sig) < 4 * se)
    assert full.shape == (7,) and short.shape == (4,)


def test_sample_step_moments():
    p = KernelParams(H=0.25)
    n = 8
    f = factorize(build_covariance(p, n))
    R = 20000
    draws = np.array([sample_step(f, n, StreamKey(11, r, 0, 1)) for r in range(R)])
    sig = build_covariance(p, n).entries
    assert np.all(np.abs(draws.mean(axis=0)) < 4 * np.sqrt(np.diag(sig) / R))
    emp = draws.T @ draws / R
    se = np.sqrt((np.outer(np.diag(sig), np.diag(sig)) + sig ** 2) / R)
    assert np.all(np.abs(emp - sig) < 4 * se)


def test_sample_step_independence_across_keys():
    p = KernelParams(H=0.25)
    f = factorize(build_covariance(p, 2))
    R = 4000
    a = np.array([sample_step(f, 2, StreamKey(3, r, 0, 1))[0] for r in range(R)])
    b = np.array([sample_step(f, 2, StreamKey(3, r, 0, 2))[0] for r in range(R)])
    c = np.array([sample_step(f, 2, StreamKey(3, r, 1, 1))[0] for r in range(R)])
    for other in (b, c):
        corr = np.corrcoef(a, other)[0, 1]
        assert abs(corr) < 4 / math.sqrt(R)


def test_sample_step_low_rank_kind():
    p = KernelParams(H=0.5)
    f = low_rank_project(build_covariance(p, 8), 1)
    d = sample_step(f, 8, StreamKey(1, 0, 0, 1))
    # rank-one: every coordinate identical up to the factor's column
    assert np.allclose(d / d[0], f.factor[:, 0] / f.factor[0, 0], rtol=1e-10)


def test_stream_key_validation():
    with pytest.raises(ValueError):
        StreamKey(-1)
    with pytest.raises(ValueError):
        StreamKey(0, replication=2 ** 25)
    with pytest.raises(ValueError):
        StreamKey(0, component=2 ** 12)
    with pytest.raises(ValueError):
        StreamKey(0, step=2 ** 26)


def test_factor_cache_roundtrip(tmp_path):
    p = KernelParams(H=0.3, T=2.0)
    f = factorize(build_covariance(p, 12))
    path = tmp_path / "factor.bin"
    save_factor(path, p, 12, f)
    p2, n2, f2 = load_factor(path)
    assert (p2.H, p2.T, n2) == (0.3, 2.0, 12)
    assert np.array_equal(f.factor, f2.factor)
    assert f2.effective_rank == f.effective_rank
    assert f2.kind == "cholesky"
    with pytest.raises(ValueError):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"NOTACACHE" + b"\0" * 64)
        load_factor(bad)


def test_plain_increments_sum_to_brownian_variance():
    # entry-0 draws summed over all steps have variance T
    from fracsve.scheme import sample_path_draws
    p = KernelParams(H=0.25, T=2.0)
    n = 8
    factor = factorize(build_covariance(p, n)).factor
    R = 4000
    totals = np.empty(R)
    for r in range(R):
        d = sample_path_draws(p, factor, n, 1, 31, r)
        totals[r] = d.plain_increments()[:, 0].sum()
    se = p.T * math.sqrt(2.0 / R)
    assert abs(totals.var(ddof=1) - p.T) < 4 * se


def test_quadrature_failure_carries_estimate():
    from fracsve.errors import QuadratureError
    from fracsve.kernel import QuadratureConfig, identity_residual
    cfg = QuadratureConfig(abs_tol=1e-300, rel_tol=1e-15, max_subdivisions=10)
    with pytest.raises(QuadratureError) as exc:
        identity_residual(KernelParams(H=0.05), cfg)
    assert exc.value.estimate is not None
