import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from switchback.calibrate import (
    GeneratorParams,
    calibrate,
    fit_ar1,
    fit_baselines_and_dow,
    fit_common_shock,
    fit_cross_leg,
    fit_gaussian_mixture,
    fit_seasonal_loadings,
    fit_seasonality,
    fourier_design,
    naive_sigma,
    power_iteration,
)
from switchback.errors import (
    DegenerateSeries,
    NonPositiveBaseline,
    RankDeficientBasis,
    ShortPanel,
    SwitchbackError,
    ZeroSeasonality,
)
from switchback.generate import calibrated_units, default_params, generate_panel, simulate_panel
from switchback.panel import PanelDataset, daily_calendar

from factories import planted_params
from oracles import ar1_paths

D0 = dt.date(2024, 1, 1)


def panel_from(y, start=D0):
    return PanelDataset(tuple(f"u{i}" for i in range(len(y))), daily_calendar(start, y.shape[1]), y)


# step 1 -------------------------------------------------------------------


def test_constant_panel_baselines():
    mu, alpha = fit_baselines_and_dow(panel_from(np.full((3, 21), 4.5)))
    np.testing.assert_allclose(mu, 4.5)
    np.testing.assert_allclose(alpha, 0.0, atol=1e-15)


def test_short_panel():
    with pytest.raises(ShortPanel):
        fit_baselines_and_dow(panel_from(np.ones((2, 13))))


def test_planted_dow_noiseless():
    alpha = np.zeros(7)
    alpha[4] = 3.0  # Friday
    alpha -= alpha.mean()
    p = panel_from(np.array([10.0, 20.0])[:, None] + np.zeros((2, 28)), start=D0)
    y = p.outcomes + alpha[p.day_of_week][None, :]
    mu_hat, alpha_hat = fit_baselines_and_dow(p.with_outcomes(y))
    np.testing.assert_allclose(mu_hat, [10.0, 20.0], atol=1e-10)
    np.testing.assert_allclose(alpha_hat, alpha, atol=1e-10)


def test_dow_matches_groupby_oracle():
    gen = np.random.default_rng(3)
    p = panel_from(gen.normal(50, 10, (6, 45)), start=dt.date(2023, 5, 17))
    mu, alpha = fit_baselines_and_dow(p)
    buckets = {d: [] for d in range(7)}
    for i in range(p.n_units):
        row_mean = sum(p.outcomes[i]) / p.n_days
        for t, day in enumerate(p.dates):
            buckets[day.weekday()].append(p.outcomes[i, t] - row_mean)
    raw = np.array([sum(v) / len(v) for _, v in sorted(buckets.items())])
    np.testing.assert_allclose(alpha, raw - raw.mean(), atol=1e-12)
    assert alpha.sum() == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(float, st.tuples(st.integers(1, 5), st.integers(14, 40)), elements=st.floats(-1e4, 1e4)))
def test_alpha_centred(y):
    _, alpha = fit_baselines_and_dow(panel_from(y))
    assert abs(alpha.sum()) <= 1e-9 * max(1.0, np.abs(y).max())


# step 2 -------------------------------------------------------------------


def test_seasonality_zero_input():
    fit = fit_seasonality(np.zeros(100), 3, 365.25)
    np.testing.assert_array_equal(fit.a, 0.0)
    np.testing.assert_array_equal(fit.b, 0.0)


def test_single_harmonic_recovery():
    t = np.arange(366)
    fit = fit_seasonality(2.0 * np.sin(2 * np.pi * t / 365.25), 1, 365.25)
    assert fit.a[0] == pytest.approx(2.0, abs=1e-8)
    assert fit.b[0] == pytest.approx(0.0, abs=1e-8)


def test_three_harmonics_with_noise_within_three_se():
    a = np.array([1.5, -0.7, 0.3])
    b = np.array([0.4, 0.9, -0.2])
    X = fourier_design(730, 3, 365.25)
    truth = np.empty(6)
    truth[0::2], truth[1::2] = a, b
    gen = np.random.default_rng(17)
    inside, errs = 0, []
    for _ in range(100):
        fit = fit_seasonality(X @ truth + 0.1 * gen.standard_normal(730), 3, 365.25)
        z = np.concatenate([(fit.a - a) / fit.stderr_a, (fit.b - b) / fit.stderr_b])
        inside += int((np.abs(z) < 3).sum())
        errs.append(np.concatenate([fit.a - a, fit.b - b]))
    assert inside >= 0.98 * 600
    mean_err = np.abs(np.mean(errs, axis=0))
    assert (mean_err < 3 * 0.1 * np.sqrt(2 / 730) / np.sqrt(100) * 1.5).all()


def test_seasonality_rank_deficient():
    with pytest.raises(RankDeficientBasis):
        fit_seasonality(np.ones(6), 3, 365.25)


def test_seasonal_loadings_cases():
    seas = np.sin(np.linspace(0, 6, 50))
    orth = np.cos(np.linspace(0, 6, 50))
    orth -= (orth @ seas) / (seas @ seas) * seas
    g = fit_seasonal_loadings(np.vstack([2 * seas, orth]), seas)
    assert g[0] == pytest.approx(2.0, abs=1e-12)
    assert g[1] == pytest.approx(0.0, abs=1e-10)
    with pytest.raises(ZeroSeasonality):
        fit_seasonal_loadings(np.ones((2, 50)), np.zeros(50))


def test_seasonal_loadings_planted():
    gen = np.random.default_rng(4)
    T = 366
    seas = 10 * np.sin(2 * np.pi * np.arange(T) / 365.25)
    gamma = gen.uniform(0, 2, 80)
    noise = 3.0
    R = gamma[:, None] * seas + noise * gen.standard_normal((80, T))
    g = fit_seasonal_loadings(R, seas)
    oracle = np.array([sum(r * s for r, s in zip(row, seas)) / sum(s * s for s in seas) for row in R])
    np.testing.assert_allclose(g, oracle, rtol=1e-10)
    se = noise / np.sqrt(seas @ seas)
    assert np.abs(g - gamma).mean() < 1.5 * se * np.sqrt(2 / np.pi)


# step 3 -------------------------------------------------------------------


def test_common_shock_rank_one():
    gen = np.random.default_rng(5)
    u = gen.standard_normal(60) + 0.5
    v = gen.uniform(0.5, 2, 12)
    fit = fit_common_shock(np.outer(u, v))
    np.testing.assert_allclose(np.outer(fit.factor, fit.loadings), np.outer(u, v), atol=1e-8)
    assert abs(np.corrcoef(fit.factor, u)[0, 1]) >= 0.999
    assert np.var(fit.factor, ddof=1) == pytest.approx(1.0, abs=1e-9)
    assert fit.loadings.sum() >= 0


def test_common_shock_zero_matrix():
    fit = fit_common_shock(np.zeros((20, 5)))
    np.testing.assert_array_equal(fit.loadings, 0.0)
    assert fit.diagnostics


def test_common_shock_explained_share_matches_eigh():
    gen = np.random.default_rng(6)
    T, N = 200, 15
    u = gen.standard_normal(T)
    v = gen.uniform(0.5, 1.5, N)
    signal = np.outer(u, v)
    R = signal + gen.standard_normal((T, N)) * signal.std() / 10
    fit = fit_common_shock(R)
    C = R.T @ R / (T - 1)
    w = np.linalg.eigh(C)[0]
    assert fit.explained_share == pytest.approx(w[-1] / w.sum(), abs=1e-6)


def test_power_iteration_matches_eigh():
    A = np.random.default_rng(7).standard_normal((10, 10))
    A = A @ A.T
    lam, v, _ = power_iteration(A)
    w, V = np.linalg.eigh(A)
    assert lam == pytest.approx(w[-1], rel=1e-9)
    assert abs(v @ V[:, -1]) == pytest.approx(1.0, abs=1e-8)


def test_common_shock_shape_check():
    with pytest.raises(SwitchbackError):
        fit_common_shock(np.ones((1, 4)))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(float, st.tuples(st.integers(2, 30), st.integers(2, 8)), elements=st.floats(-100, 100)))
def test_common_shock_conventions(R):
    fit = fit_common_shock(R)
    assert fit.loadings.sum() >= 0
    if np.any(fit.loadings != 0):
        assert np.var(fit.factor, ddof=1) == pytest.approx(1.0, abs=1e-6)


# step 4 -------------------------------------------------------------------


def test_ar1_iid():
    phi, sigma = fit_ar1(np.random.default_rng(8).standard_normal(5000))
    assert abs(phi) < 0.05
    assert sigma == pytest.approx(1.0, abs=0.05)


def test_ar1_planted():
    x = ar1_paths(0.7, 1.0, 5000, 1, np.random.default_rng(9))[0]
    phi, sigma = fit_ar1(x)
    assert 0.65 <= phi <= 0.75
    assert 0.97 <= sigma <= 1.03


def test_ar1_degenerate_and_clamp():
    with pytest.raises(DegenerateSeries):
        fit_ar1(np.full(50, 3.0))
    with pytest.raises(DegenerateSeries):
        fit_ar1(np.arange(9.0))
    phi, _ = fit_ar1(1.05 ** np.arange(40))
    assert phi == 0.99


# cross-leg ----------------------------------------------------------------


def test_cross_leg_degenerate():
    mixture, model, diags = fit_cross_leg(np.full(10, 50.0), np.full(10, 2.0))
    assert mixture.n_components == 1
    assert any("collinear" in d for d in diags)
    assert model.tau == pytest.approx(0.0, abs=1e-12)


def test_mixture_two_components():
    gen = np.random.default_rng(10)
    x = np.concatenate([gen.normal(0, 0.5, 250), gen.normal(3, 0.5, 250)])
    fit = fit_gaussian_mixture(x, 3, seed=1)
    assert fit.n_components == 2
    assert fit.means[0] == pytest.approx(0.0, abs=0.2)
    assert fit.means[1] == pytest.approx(3.0, abs=0.2)
    assert sum(fit.weights) == pytest.approx(1.0)


def test_taylor_law_slope():
    gen = np.random.default_rng(11)
    log_mu = gen.normal(6, 1, 500)
    log_sigma = -1 + 0.8 * log_mu + gen.normal(0, 0.1, 500)
    _, model, _ = fit_cross_leg(np.exp(log_mu), np.exp(log_sigma))
    assert 0.75 <= model.slope <= 0.85
    assert model.tau == pytest.approx(0.1, abs=0.02)


def test_cross_leg_rejects_nonpositive():
    with pytest.raises(NonPositiveBaseline):
        fit_cross_leg(np.array([1.0, 2, 3, -1, 5]), np.ones(5))


# full calibration ---------------------------------------------------------


def test_round_trip_planted_high_snr():
    params = planted_params(N=30, T=730, sigma=0.5, loading=2.0, amplitude=10.0, phi=0.4, seed=2)
    panel = generate_panel(params, 30, 730, seed=3, units=calibrated_units(params))
    fit = calibrate(panel)
    assert fit.violations() == []
    np.testing.assert_allclose(fit.mu, params.mu, atol=1.0)
    # each weekday mean averages ~104 days of the common shock plus idiosyncratic noise
    day_sd = np.hypot(params.shock_loading.mean(), np.sqrt(np.mean(params.ar_sigma**2 / (1 - params.ar_phi**2)) / 30))
    np.testing.assert_allclose(fit.alpha, params.alpha, atol=4 * day_sd / np.sqrt(730 / 7))
    np.testing.assert_allclose(fit.fourier_a, params.fourier_a, atol=0.5)
    np.testing.assert_allclose(fit.fourier_b, params.fourier_b, atol=0.5)
    np.testing.assert_allclose(fit.gamma, params.gamma, atol=0.05)
    assert np.corrcoef(fit.shock_loading, params.shock_loading)[0, 1] > 0.99
    np.testing.assert_allclose(fit.shock_loading, params.shock_loading, rtol=0.1)
    assert np.abs(fit.ar_phi - params.ar_phi).max() < 0.15
    assert np.mean(fit.ar_sigma / params.ar_sigma) == pytest.approx(1.0, abs=0.03)


def test_constant_panel_surfaces_diagnostics():
    panel = panel_from(np.full((5, 60), 12.0))
    params = calibrate(panel)
    np.testing.assert_allclose(params.mu, 12.0)
    np.testing.assert_allclose(params.alpha, 0.0, atol=1e-12)
    np.testing.assert_allclose(params.fourier_a, 0.0, atol=1e-12)
    np.testing.assert_allclose(params.shock_loading, 0.0)
    np.testing.assert_array_equal(params.ar_phi, 0.0)
    assert sum("phi=0" in d for d in params.diagnostics) == 5
    assert params.violations() == []


def test_components_removed_in_order():
    params = planted_params(N=10, T=364, sigma=0.0 + 1e-300, loading=0.0, seed=4)
    panel = generate_panel(params, 10, 364, seed=1, units=calibrated_units(params))
    fitted, trace = calibrate(panel, return_trace=True)
    dow = panel.day_of_week
    for d in range(7):
        assert abs(trace.after_dow[:, dow == d].mean()) < 1e-9
    seas = trace.fitted_seasonal
    for row in trace.after_seasonality:
        assert abs(row @ seas) / (np.linalg.norm(row) * np.linalg.norm(seas) + 1e-300) < 1e-6 or np.linalg.norm(row) < 1e-8


def test_no_variance_double_counting():
    params = default_params()
    panel = generate_panel(params, 80, 366, seed=5, units=calibrated_units(params))
    fitted = calibrate(panel)
    assert (fitted.ar_sigma < naive_sigma(panel)).all()


def test_regenerated_variance_close():
    params = default_params()
    panel = generate_panel(params, 80, 366, seed=6, units=calibrated_units(params))
    fitted = calibrate(panel)
    regen = generate_panel(fitted, 80, 366, seed=7, units=calibrated_units(fitted))
    ratio = regen.outcomes.var(axis=1, ddof=1) / panel.outcomes.var(axis=1, ddof=1)
    assert abs(ratio.mean() - 1) < 0.15


def test_params_json_round_trip(tmp_path):
    params = calibrate(generate_panel(default_params(), 20, 120, seed=1))
    path = tmp_path / "params.json"
    params.save(path)
    back = GeneratorParams.load(path)
    assert back.to_json() == params.to_json()
    for name in ("mu", "alpha", "gamma", "shock_factor", "shock_loading", "ar_phi", "ar_sigma"):
        np.testing.assert_array_equal(getattr(back, name), getattr(params, name))
    assert '"schema_version": 1' in path.read_text()


def test_params_schema_version_checked():
    d = default_params().to_dict()
    d["schema_version"] = 99
    with pytest.raises(SwitchbackError):
        GeneratorParams.from_dict(d)


def test_default_params_valid():
    p = default_params()
    assert p.violations() == []
    assert p.n_units == 80
    assert np.var(p.shock_factor, ddof=1) == pytest.approx(1.0, abs=1e-6)
