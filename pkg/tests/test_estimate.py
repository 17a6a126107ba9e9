import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats

from switchback.design import fixed_assignment, random_pods, switchback_assignment
from switchback.errors import DimensionMismatch, NotIdentified, SingleCluster
from switchback.estimate import (
    AutocovSpec,
    cluster_robust_se,
    diff_variance,
    double_demean,
    effective_sample_variance,
    twfe_arrays,
    twfe_fit,
    within_transform,
)
from switchback.panel import PanelDataset, daily_calendar

from oracles import dummy_ols, sandwich_se


def random_case(gen, N=None, T=None):
    N = N or int(gen.integers(2, 9))
    T = T or int(gen.integers(3 if N == 2 else 2, 21))
    while True:
        D = (gen.random((N, T)) < 0.5).astype(float)
        if (double_demean(D) ** 2).sum() > 1e-6:
            break
    Y = gen.standard_normal((N, T)) * 3 + gen.standard_normal(N)[:, None] * 5
    return Y, D


def sb_panel(N, T, block, seed, noise=0.0, beta=0.0):
    pods = random_pods(N, seed)
    s = switchback_assignment(pods, T, block, seed)
    gen = np.random.default_rng(seed)
    y = gen.normal(100, 10, N)[:, None] + gen.normal(0, 5, T)[None, :] + beta * s.D + noise * gen.standard_normal((N, T))
    panel = PanelDataset(s.unit_ids, s.dates, y)
    return panel, s


# double demeaning ---------------------------------------------------------


def test_double_demean_constant():
    np.testing.assert_allclose(double_demean(np.full((3, 4), 7.0)), 0.0, atol=1e-15)


def test_double_demean_2x2():
    np.testing.assert_allclose(double_demean(np.eye(2)), [[0.5, -0.5], [-0.5, 0.5]])


def test_double_demean_synchronized():
    pattern = np.array([0, 1, 1, 0, 1.0])
    np.testing.assert_allclose(double_demean(np.tile(pattern, (4, 1))), 0.0, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(float, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12), elements=st.floats(-1e3, 1e3)))
def test_double_demean_margins_zero(M):
    out = double_demean(M)
    scale = max(1.0, np.abs(M).max())
    assert np.abs(out.sum(axis=1)).max() <= 1e-10 * scale * M.shape[1]
    assert np.abs(out.sum(axis=0)).max() <= 1e-10 * scale * M.shape[0]


def test_within_transform_matches_double_demean_on_balanced():
    M = np.random.default_rng(0).standard_normal((5, 9))
    np.testing.assert_allclose(within_transform(M), double_demean(M), atol=1e-10)


def test_within_transform_unbalanced_matches_dummy_projection():
    gen = np.random.default_rng(1)
    N, T = 5, 8
    M = gen.standard_normal((N, T))
    w = np.ones((N, T))
    w[0, 2] = w[3, 5] = w[4, 0] = 0
    out = within_transform(M, w)
    obs = np.flatnonzero(w.ravel())
    unit = np.repeat(np.arange(N), T)[obs]
    day = np.tile(np.arange(T), N)[obs]
    X = np.column_stack([(unit[:, None] == np.arange(N)), (day[:, None] == np.arange(1, T))]).astype(float)
    y = M.ravel()[obs]
    resid = y - X @ np.linalg.lstsq(X, y, rcond=None)[0]
    np.testing.assert_allclose(out.ravel()[obs], resid, atol=1e-8)


# point estimate -----------------------------------------------------------


def test_noiseless_planted_effect():
    for block in (1, 7, 3):
        panel, s = sb_panel(10, 28, block, seed=block, beta=4.25)
        fit = twfe_fit(panel, s)
        assert fit.beta_hat == pytest.approx(4.25, abs=1e-10)
        assert fit.se == pytest.approx(0.0, abs=1e-9)


def test_matches_dummy_ols_on_switchback():
    panel, s = sb_panel(6, 10, 2, seed=3, noise=1.0, beta=0.7)
    fit = twfe_fit(panel, s)
    beta, *_ = dummy_ols(panel.outcomes, s.D)
    assert fit.beta_hat == pytest.approx(beta, abs=1e-8)


def test_oracle_100_random_panels():
    gen = np.random.default_rng(2024)
    for _ in range(100):
        Y, D = random_case(gen)
        fit = twfe_arrays(Y, D)
        beta, resid, X, _ = dummy_ols(Y, D)
        N, T = Y.shape
        clusters = np.repeat(np.arange(N), T)
        assert abs(fit.beta_hat - beta) < 1e-8
        assert abs(fit.se - sandwich_se(X, resid, clusters, N + T)) < 1e-8
        np.testing.assert_allclose(fit.residuals.ravel(), resid, atol=1e-8)


def test_synchronized_not_identified():
    pods = random_pods(6, 0)
    s = switchback_assignment(pods, 14, 7, 0)
    D = np.tile(s.D[0], (6, 1))
    with pytest.raises(NotIdentified):
        twfe_arrays(np.random.default_rng(0).standard_normal((6, 14)), D)
    with pytest.raises(NotIdentified):
        twfe_arrays(np.zeros((3, 5)), np.ones((3, 5)))


def test_no_residual_dof():
    with pytest.raises(NotIdentified):
        twfe_arrays(np.random.default_rng(0).standard_normal((2, 2)), np.eye(2))


def test_dimension_mismatch():
    panel, s = sb_panel(4, 14, 7, seed=0)
    with pytest.raises(DimensionMismatch):
        twfe_fit(panel.window(0, 7), s)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 100))
def test_location_invariance_and_scale_equivariance(seed, c):
    gen = np.random.default_rng(seed)
    Y, D = random_case(gen)
    base = twfe_arrays(Y, D)
    shifted = twfe_arrays(Y + gen.normal(0, 50, Y.shape[0])[:, None] + gen.normal(0, 50, Y.shape[1])[None, :], D)
    assert shifted.beta_hat == pytest.approx(base.beta_hat, abs=1e-10 * max(1, np.abs(Y).max()) * 100)
    scaled = twfe_arrays(c * Y, D)
    assert scaled.beta_hat == pytest.approx(c * base.beta_hat, rel=1e-9, abs=1e-12)
    assert scaled.se == pytest.approx(c * base.se, rel=1e-9, abs=1e-12)


# cluster-robust SE --------------------------------------------------------


def test_zero_residuals_zero_se():
    panel, s = sb_panel(6, 14, 7, seed=1, beta=2.0)
    fit = twfe_fit(panel, s)
    assert cluster_robust_se(fit, np.arange(6)) == pytest.approx(0.0, abs=1e-9)
    assert fit.p_value == 0.0 or fit.se > 0


def test_single_cluster():
    panel, s = sb_panel(6, 14, 7, seed=1, noise=1.0)
    fit = twfe_fit(panel, s)
    with pytest.raises(SingleCluster):
        cluster_robust_se(fit, np.zeros(6, dtype=int))


def test_cluster_se_matches_sandwich_with_grouped_clusters():
    gen = np.random.default_rng(5)
    Y, D = random_case(gen, N=8, T=12)
    fit = twfe_arrays(Y, D)
    groups = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    _, resid, X, _ = dummy_ols(Y, D)
    oracle = sandwich_se(X, resid, np.repeat(groups, 12), 8 + 12)
    assert cluster_robust_se(fit, groups) == pytest.approx(oracle, abs=1e-10)
    per_cell = np.broadcast_to(groups[:, None], (8, 12))
    assert cluster_robust_se(fit, per_cell) == pytest.approx(oracle, abs=1e-10)


def test_inference_fields():
    panel, s = sb_panel(10, 28, 7, seed=9, noise=3.0, beta=1.0)
    fit = twfe_fit(panel, s)
    assert fit.n_clusters == 10
    assert fit.t_stat == pytest.approx(fit.beta_hat / fit.se)
    assert fit.p_value == pytest.approx(2 * stats.t.sf(abs(fit.t_stat), 9))
    assert 0 <= fit.p_value <= 1
    assert fit.regressor_mass == pytest.approx((fit.d_star**2).sum())
    rep = json.loads(fit.to_json())
    assert set(rep) == {"beta_hat", "se", "t", "p", "n_clusters", "regressor_mass", "design", "horizon_days"}
    assert rep["design"] == "Switchback" and rep["horizon_days"] == 28


def test_fixed_design_uses_pre_period():
    pods = random_pods(8, 0)
    s = fixed_assignment(pods, 14, 1)
    gen = np.random.default_rng(0)
    y = gen.normal(50, 5, 8)[:, None] + gen.normal(0, 2, 14)[None, :] + 3.0 * s.D
    fit = twfe_fit(PanelDataset(s.unit_ids, s.dates, y), s)
    assert fit.beta_hat == pytest.approx(3.0, abs=1e-10)


def test_precision_tracks_regressor_mass():
    N, T = 8, 24
    gen = np.random.default_rng(11)
    masses, variances = [], []
    for k in range(25):
        D = (gen.random((N, T)) < gen.uniform(0.05, 0.5)).astype(float)
        dd = double_demean(D)
        mass = (dd**2).sum()
        if mass < 1e-6:
            continue
        betas = []
        for _ in range(300):
            betas.append(((double_demean(gen.standard_normal((N, T))) * dd).sum()) / mass)
        masses.append(mass)
        variances.append(np.var(betas))
    rho = stats.spearmanr(masses, variances).statistic
    assert rho < -0.95 or np.corrcoef(np.log(masses), np.log(variances))[0, 1] < -0.95


# variance algebra ---------------------------------------------------------


def double_sum_oracle(gamma0, rho, T):
    acf = lambda k: 1.0 if k == 0 else (rho[k - 1] if k - 1 < len(rho) else 0.0)
    return sum(gamma0 * acf(abs(t - s)) for t in range(T) for s in range(T)) / T**2


def test_ess_iid():
    for T in (1, 5, 50):
        assert effective_sample_variance(AutocovSpec(2.0, ()), T) == pytest.approx(2.0 / T)


def test_ess_geometric():
    spec = AutocovSpec(1.0, [0.5**k for k in range(1, 10)])
    assert effective_sample_variance(spec, 4) == pytest.approx(0.515625, abs=1e-15)
    assert double_sum_oracle(1.0, spec.rho, 4) == pytest.approx(0.515625, abs=1e-15)


def test_ess_perfect_persistence():
    for T in (1, 2, 10, 100):
        assert effective_sample_variance(AutocovSpec(1.0, [1.0] * 200), T) == pytest.approx(1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 10), st.lists(st.floats(-1, 1), max_size=15), st.integers(1, 20))
def test_ess_double_sum(gamma0, rho, T):
    assert effective_sample_variance(AutocovSpec(gamma0, rho), T) == pytest.approx(
        double_sum_oracle(gamma0, rho, T), rel=1e-10, abs=1e-12
    )


def test_autocov_spec_validation():
    with pytest.raises(ValueError):
        AutocovSpec(-1.0)
    with pytest.raises(ValueError):
        AutocovSpec(1.0, [1.5])


def test_diff_variance():
    assert diff_variance(1.0, 1.0) == 0.0
    assert diff_variance(1.0, 0.9**1 * 1.0) == pytest.approx(0.2)
    assert diff_variance(3.0, 0.0) == 6.0
    with pytest.raises(ValueError):
        diff_variance(1.0, 2.0)
