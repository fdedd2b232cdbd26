import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from filica.engine import Decomposition, EngineError, reconstruct
from filica.evaluation import best_match, h_metrics
from filica.fusion import (
    FiLicaConfig,
    crude_h,
    fit_complete_case,
    fit_filica,
    fit_oracle,
    fit_replace0,
    impute_missing,
    reduced_budget,
    rescale_h,
    standardize,
)
from filica.matrixio import MaskedModality
from filica.simgen import gen_replicate

FAST = FiLicaConfig(L=5, lica_iters=500, fi_updates=20)


def _decomp(xw, h):
    xw = tuple(np.asarray(m, float) for m in xw)
    return Decomposition(xw=xw, weights=tuple(np.ones(m.shape[1]) for m in xw), h=np.asarray(h, float),
                         noise_var=tuple(0.0 for _ in xw), objective_trace=(0.0,), converged=True)


# standardize -----------------------------------------------------------------

def test_standardize_examples():
    out = standardize(MaskedModality("m", [[1.0, 2.0, 3.0]])).values[0]
    expected = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0 / 3.0)
    assert np.allclose(out, expected, atol=1e-12)
    assert np.array_equal(standardize(MaskedModality("m", [[5.0, 5.0, 5.0]])).values, np.zeros((1, 3)))
    m = MaskedModality("m", [[1.0, np.nan, 3.0]])
    out = standardize(m).values[0]
    assert out[0] == -1.0 and out[2] == 1.0 and np.isnan(out[1])


def test_standardize_needs_two_observed():
    with pytest.raises(ValueError):
        standardize(MaskedModality("m", [[1.0, np.nan, np.nan]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 12), st.integers(1, 8))
def test_standardize_moments(seed, n, v):
    rng = np.random.default_rng(seed)
    values = rng.normal(3.0, 5.0, size=(v, n))
    obs = rng.random(n) < 0.7
    obs[:2] = True
    out = standardize(MaskedModality("m", values, obs))
    y = out.values[:, obs]
    assert np.max(np.abs(y.mean(axis=1))) < 1e-10
    assert np.max(np.abs(np.sqrt(np.mean(y * y, axis=1)) - 1.0)) < 1e-10
    assert np.isnan(out.values[:, ~obs]).all()


# rescale_h -------------------------------------------------------------------

def test_rescale_examples():
    h = np.array([[2.0, -2.0, 2.0, -2.0], [1.0, 0.0, -1.0, 0.5]])
    d = _decomp([np.ones((3, 2))], h)
    r = rescale_h(d)
    sd = np.std(h, axis=1, ddof=1)
    assert np.allclose(r.h[0], h[0] / sd[0])
    assert np.allclose(r.xw[0][:, 0], sd[0])
    unit = rescale_h(r)
    assert np.max(np.abs(unit.h - r.h)) < 1e-12
    assert np.max(np.abs(unit.xw[0] - r.xw[0])) < 1e-12


def test_rescale_zero_variance():
    with pytest.raises(ValueError):
        rescale_h(_decomp([np.ones((3, 2))], np.array([[1.0, 1.0, 1.0], [0.0, 1.0, 2.0]])))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_rescale_invariants(seed):
    rng = np.random.default_rng(seed)
    L, n = rng.integers(1, 6), rng.integers(3, 30)
    h = rng.standard_normal((L, n)) * rng.uniform(0.1, 10.0, size=(L, 1))
    d = _decomp([rng.standard_normal((7, L)), rng.standard_normal((4, L))], h)
    r = rescale_h(d)
    for k in range(2):
        assert np.linalg.norm(reconstruct(d, k) - reconstruct(r, k)) < 1e-10
    assert np.max(np.abs(np.std(r.h, axis=1, ddof=1) - 1.0)) < 1e-8


# crude_h ---------------------------------------------------------------------

def test_crude_h_orthonormal():
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.standard_normal((20, 3)))
    y = rng.standard_normal((20, 6))
    assert np.allclose(crude_h(q, y, [1, 4]), q.T @ y[:, [1, 4]], atol=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_crude_h_matches_normal_equations(seed):
    rng = np.random.default_rng(seed)
    xw, y = rng.standard_normal((50, 2)), rng.standard_normal((50, 4))
    got = crude_h(xw, y)
    for j in range(4):
        col = np.linalg.solve(xw.T @ xw, xw.T @ y[:, j])
        assert np.max(np.abs(got[:, j] - col)) < 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_crude_h_rank_deficient_is_min_norm(seed):
    rng = np.random.default_rng(seed)
    col = rng.standard_normal((30, 1))
    xw, y = np.hstack([col, col]), rng.standard_normal((30, 3))
    u, s, vt = np.linalg.svd(xw, full_matrices=False)
    keep = s > s[0] * 1e-12
    oracle = vt[keep].T @ np.diag(1 / s[keep]) @ u[:, keep].T @ y
    got = crude_h(xw, y)
    assert np.all(np.isfinite(got))
    assert np.max(np.abs(got - oracle)) < 1e-8


def test_crude_h_rejects_unobserved_subject():
    y = np.ones((5, 3))
    y[:, 1] = np.nan
    with pytest.raises(ValueError):
        crude_h(np.eye(5)[:, :2], y, [1])


# impute_missing --------------------------------------------------------------

def _gappy():
    values = np.arange(12.0).reshape(3, 4)
    return MaskedModality("m", values, [True, False, True, False])


def test_impute_zero_and_rank_one():
    m = _gappy()
    out = impute_missing(m, np.ones((3, 1)), np.zeros((1, 2)))
    assert np.array_equal(out.values[:, [1, 3]], np.zeros((3, 2)))
    out = impute_missing(m, np.ones((3, 1)), np.array([[3.0, 3.0]]))
    assert np.array_equal(out.values[:, [1, 3]], np.full((3, 2), 3.0))
    assert out.values[:, m.observed].tobytes() == m.values[:, m.observed].tobytes()
    assert out.observed.tolist() == m.observed.tolist()


def test_impute_dimension_mismatch():
    with pytest.raises(ValueError):
        impute_missing(_gappy(), np.ones((3, 1)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        impute_missing(_gappy(), np.ones((2, 1)), np.zeros((1, 2)))


# methods ---------------------------------------------------------------------

def test_complete_case_counts():
    truth, masked, full = gen_replicate("mcar", 0.2, seed=5)
    res = fit_complete_case(masked, FAST)
    assert res.decomposition.h.shape == (5, 60)
    assert res.subjects.tolist() == sorted(res.subjects.tolist())


def test_complete_case_without_missing_equals_oracle():
    truth, masked, full = gen_replicate("mcar", 0.0, seed=5)
    a = fit_complete_case(masked, FAST).decomposition
    b = fit_oracle(full, FAST).decomposition
    assert a.h.tobytes() == b.h.tobytes()


def test_complete_case_too_few():
    rng = np.random.default_rng(0)
    obs = np.array([True] * 3 + [False] * 5)
    mods = [MaskedModality("a", rng.standard_normal((20, 8)), obs),
            MaskedModality("b", rng.standard_normal((20, 8)))]
    with pytest.raises(ValueError, match="complete-case"):
        fit_complete_case(mods, FiLicaConfig(L=4))


def test_filica_degenerates_to_complete_case():
    truth, masked, full = gen_replicate("mcar", 0.0, seed=9)
    fi = fit_filica(masked, FAST)
    cc = fit_complete_case(masked, FAST)
    assert fi.fi_converged
    assert fi.fi_deltas[-1]["rel_dH"] < FAST.tol_rel
    match = best_match(np.vstack(fi.decomposition.xw), np.vstack(cc.decomposition.xw))
    corr = h_metrics(fi.decomposition.h, cc.decomposition.h, match)
    assert np.all(corr >= 0.999)


def test_filica_structure_and_observed_cells():
    truth, masked, full = gen_replicate("mcar", 0.1, seed=21)
    res = fit_filica(masked, FiLicaConfig(L=5, lica_iters=500, fi_updates=3))
    assert res.decomposition.h.shape == (5, 100)
    assert 1 <= len(res.fi_deltas) <= 3
    for delta in res.fi_deltas:
        assert delta["dXw"] >= 0 and delta["dH"] >= 0
    last = res.fi_deltas[-1]
    assert res.fi_converged == (last["rel_dXw"] < 1e-3 and last["rel_dH"] < 1e-3)
    for m, imp in zip(masked, res.imputed):
        std = standardize(m)
        assert imp.values[:, m.observed].tobytes() == std.values[:, m.observed].tobytes()
        assert np.all(np.isfinite(imp.values))


def test_filica_deterministic():
    truth, masked, full = gen_replicate("mar_continuous", 0.1, seed=2)
    cfg = FiLicaConfig(L=5, lica_iters=300, fi_updates=3)
    a, b = fit_filica(masked, cfg), fit_filica(masked, cfg)
    assert a.decomposition.h.tobytes() == b.decomposition.h.tobytes()
    assert a.fi_deltas == b.fi_deltas


def test_filica_beats_replace0_on_one_replicate():
    truth, masked, full = gen_replicate("mcar", 0.2, seed=1000)
    cfg = FiLicaConfig(L=5, lica_iters=1000)
    scores = {}
    for name, res in (("filica", fit_filica(masked, cfg)), ("replace0", fit_replace0(masked, cfg))):
        match = best_match(np.vstack(res.decomposition.xw), truth.xw_stacked)
        scores[name] = h_metrics(res.decomposition.h, truth.h_true, match)
    assert np.all(scores["filica"] > scores["replace0"])


def test_replace0_without_missing_equals_oracle():
    truth, masked, full = gen_replicate("mcar", 0.0, seed=4)
    a = fit_replace0(masked, FAST).decomposition
    b = fit_oracle(full, FAST).decomposition
    assert a.h.tobytes() == b.h.tobytes()


def test_replace0_zero_fill_contract():
    truth, masked, full = gen_replicate("mcar", 0.2, seed=4)
    seen = []

    def engine(ys, cfg, iters):
        seen.append([y.copy() for y in ys])
        raise EngineError("stop")

    with pytest.raises(EngineError):
        fit_replace0(masked, FiLicaConfig(lica_iters=1), engine=engine)
    for m, y in zip(masked, seen[0]):
        assert np.all(y[:, m.missing_idx] == 0.0)


def test_replace0_retry_budget():
    truth, masked, full = gen_replicate("mcar", 0.2, seed=4)
    calls = []

    def engine(ys, cfg, iters):
        calls.append(iters)
        if iters >= 1500:
            raise EngineError("did not converge")
        return rescale_h(_decomp([np.ones((y.shape[0], 2)) for y in ys],
                                 np.vstack([np.arange(100.0), np.arange(100.0)[::-1] ** 2])))

    res = fit_replace0(masked, FiLicaConfig(lica_iters=1500), engine=engine)
    assert calls == [1500, 1125]
    assert res.effective_iters == 1125


def test_replace0_budget_exhausted():
    truth, masked, full = gen_replicate("mcar", 0.2, seed=4)

    def engine(ys, cfg, iters):
        raise EngineError("always")

    with pytest.raises(EngineError, match="exhausted"):
        fit_replace0(masked, FiLicaConfig(lica_iters=10), engine=engine)


def test_reduced_budget_rounds_cut_up():
    assert reduced_budget(1500) == 1125
    assert reduced_budget(10) == 7
    assert reduced_budget(1) == 0


def test_oracle_rejects_missing():
    truth, masked, full = gen_replicate("mcar", 0.05, seed=4)
    with pytest.raises(ValueError):
        fit_oracle(masked, FAST)


def test_oracle_noiseless_fixture():
    from filica.simgen import gen_spatial_maps
    rng = np.random.default_rng(0)
    xs = [gen_spatial_maps(v, 0, noise_scale=0.0) for v in (1000, 3000)]
    h = rng.standard_normal((2, 50))
    mods = [MaskedModality(f"m{k}", x @ h) for k, x in enumerate(xs)]
    d = fit_oracle(mods, FiLicaConfig(L=2)).decomposition
    for j in range(2):
        assert max(abs(np.corrcoef(d.h[i], h[j])[0, 1]) for i in range(2)) > 0.999


def test_oracle_simulated_recovery():
    truth, masked, full = gen_replicate("mcar", 0.0, seed=8)
    d = fit_oracle(full, FiLicaConfig(L=5, lica_iters=1500)).decomposition
    match = best_match(np.vstack(d.xw), truth.xw_stacked)
    assert np.all(match.xw_abs_corr > 0.9)
    assert np.all(h_metrics(d.h, truth.h_true, match) > 0.9)


def test_config_validation():
    with pytest.raises(ValueError):
        FiLicaConfig(L=0)
    with pytest.raises(ValueError):
        FiLicaConfig(tol_rel=1.0)
