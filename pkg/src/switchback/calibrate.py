"""Calibrate the synthetic panel generator to observed data.

Model for unit ``i`` on day ``t``::

    y[i, t] = mu[i] + alpha[dow(t)] + gamma[i] * seas[t] + loading[i] * shock[t] + r[i, t]
    r[i, t] = phi[i] * r[i, t-1] + eps[i, t],   eps ~ N(0, sigma[i]^2)

Components are fitted one at a time and removed before the next is fitted,
so the AR innovation scale is measured on what is left after seasonality and
the common shock are gone.  Fitting dispersion on the raw series would
count that variance twice when the generator adds the components back.
"""

from __future__ import annotations

import datetime as dt
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .design import lloyd
from .errors import (
    DegenerateSeries,
    NonPositiveBaseline,
    RankDeficientBasis,
    ShortPanel,
    SwitchbackError,
    ZeroSeasonality,
)
from .panel import PanelDataset

SCHEMA_VERSION = 1
PHI_CAP = 0.99
DEFAULT_HARMONICS = 3
DEFAULT_PERIOD = 365.25


@dataclass(frozen=True)
class GaussianMixture1D:
    weights: tuple[float, ...]
    means: tuple[float, ...]
    variances: tuple[float, ...]
    log_likelihood: float = float("nan")
    bic: float = float("nan")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def sample(self, n: int, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` values; also returns the component of each draw."""
        comp = gen.choice(self.n_components, size=n, p=np.asarray(self.weights))
        x = gen.normal(np.asarray(self.means)[comp], np.sqrt(np.asarray(self.variances))[comp])
        return x, comp


@dataclass(frozen=True)
class SigmaModel:
    """``log sigma = intercept + slope * log mu + N(0, tau^2)``."""

    intercept: float
    slope: float
    tau: float


@dataclass(frozen=True, eq=False)
class GeneratorParams:
    """Everything needed to simulate a panel.

    Per-unit arrays (``mu``, ``gamma``, ``shock_loading``, ``ar_phi``,
    ``ar_sigma``) describe the calibration units; new portfolios draw from
    ``mixture`` and ``sigma_model`` and resample the rest from these.
    """

    mu: np.ndarray
    alpha: np.ndarray
    fourier_a: np.ndarray
    fourier_b: np.ndarray
    period: float
    gamma: np.ndarray
    shock_factor: np.ndarray
    shock_loading: np.ndarray
    ar_phi: np.ndarray
    ar_sigma: np.ndarray
    mixture: GaussianMixture1D
    sigma_model: SigmaModel
    start_date: dt.date = dt.date(2024, 1, 1)
    diagnostics: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        for name in ("mu", "alpha", "fourier_a", "fourier_b", "gamma", "shock_factor", "shock_loading", "ar_phi", "ar_sigma"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_harmonics(self) -> int:
        return len(self.fourier_a)

    @property
    def n_units(self) -> int:
        return len(self.mu)

    def seasonal(self, t: np.ndarray) -> np.ndarray:
        return fourier_series(self.fourier_a, self.fourier_b, self.period, t)

    def violations(self) -> list[str]:
        out = []
        if self.alpha.shape != (7,):
            out.append("alpha must have 7 entries")
        elif abs(self.alpha.sum()) > 1e-9 * max(1.0, np.abs(self.alpha).max()):
            out.append("alpha does not sum to zero")
        if len(self.shock_factor) > 1 and np.any(self.shock_loading != 0):
            if abs(np.var(self.shock_factor, ddof=1) - 1) > 1e-6:
                out.append("shock factor variance is not 1")
        if np.any(np.abs(self.ar_phi) >= 1):
            out.append("|phi| must be < 1")
        if np.any(self.ar_sigma <= 0):
            out.append("sigma must be positive")
        if abs(sum(self.mixture.weights) - 1) > 1e-9:
            out.append("mixture weights do not sum to one")
        if any(v <= 0 for v in self.mixture.variances):
            out.append("mixture variances must be positive")
        if self.sigma_model.tau < 0:
            out.append("tau must be non-negative")
        n = len(self.mu)
        for name in ("gamma", "shock_loading", "ar_phi", "ar_sigma"):
            if len(getattr(self, name)) != n:
                out.append(f"{name} length differs from mu")
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "start_date": self.start_date.isoformat(),
            "mu": self.mu.tolist(),
            "alpha": self.alpha.tolist(),
            "fourier": {"a": self.fourier_a.tolist(), "b": self.fourier_b.tolist(), "period": self.period},
            "gamma": self.gamma.tolist(),
            "shock_factor": self.shock_factor.tolist(),
            "shock_loading": self.shock_loading.tolist(),
            "ar_phi": self.ar_phi.tolist(),
            "ar_sigma": self.ar_sigma.tolist(),
            "mixture": asdict(self.mixture),
            "sigma_model": asdict(self.sigma_model),
            "diagnostics": list(self.diagnostics),
        }

    def to_json(self) -> str:
        # Python floats serialize with repr, which round-trips exactly.
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorParams:
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SwitchbackError(f"unsupported GeneratorParams schema version {version!r}")
        return cls(
            mu=d["mu"],
            alpha=d["alpha"],
            fourier_a=d["fourier"]["a"],
            fourier_b=d["fourier"]["b"],
            period=float(d["fourier"]["period"]),
            gamma=d["gamma"],
            shock_factor=d["shock_factor"],
            shock_loading=d["shock_loading"],
            ar_phi=d["ar_phi"],
            ar_sigma=d["ar_sigma"],
            mixture=GaussianMixture1D(
                tuple(d["mixture"]["weights"]),
                tuple(d["mixture"]["means"]),
                tuple(d["mixture"]["variances"]),
                d["mixture"].get("log_likelihood", float("nan")),
                d["mixture"].get("bic", float("nan")),
            ),
            sigma_model=SigmaModel(**d["sigma_model"]),
            start_date=dt.date.fromisoformat(d["start_date"]),
            diagnostics=tuple(d.get("diagnostics", ())),
        )

    @classmethod
    def from_json(cls, text: str) -> GeneratorParams:
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> GeneratorParams:
        return cls.from_json(Path(path).read_text())


# step 1 -------------------------------------------------------------------


def fit_baselines_and_dow(panel: PanelDataset) -> tuple[np.ndarray, np.ndarray]:
    """Unit means and the centred global day-of-week profile (index 0 = Monday)."""
    y = panel.outcomes
    if panel.n_days < 14:
        raise ShortPanel(f"need at least 14 days, got {panel.n_days}")
    mu = y.mean(axis=1)
    dev = y - mu[:, None]
    alpha = np.array([dev[:, panel.day_of_week == d].mean() for d in range(7)])
    return mu, alpha - alpha.mean()


# step 2 -------------------------------------------------------------------


def fourier_design(T: int | np.ndarray, K: int, P: float) -> np.ndarray:
    """Columns ``sin(2 pi k t / P), cos(2 pi k t / P)`` for ``k = 1..K``, interleaved."""
    t = np.arange(T) if np.ndim(T) == 0 else np.asarray(T, dtype=float)
    cols = []
    for k in range(1, K + 1):
        w = 2 * np.pi * k * t / P
        cols += [np.sin(w), np.cos(w)]
    return np.column_stack(cols) if cols else np.empty((len(t), 0))


def fourier_series(a: np.ndarray, b: np.ndarray, P: float, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for k, (ak, bk) in enumerate(zip(a, b), start=1):
        w = 2 * np.pi * k * t / P
        out += ak * np.sin(w) + bk * np.cos(w)
    return out


@dataclass(frozen=True)
class FourierFit:
    a: np.ndarray
    b: np.ndarray
    period: float
    fitted: np.ndarray
    stderr_a: np.ndarray
    stderr_b: np.ndarray


def fit_seasonality(series: np.ndarray, K: int, P: float) -> FourierFit:
    """Least-squares fit of ``K`` harmonics with period ``P`` (no intercept).

    Standard errors use the residual variance with ``T - 2K`` degrees of
    freedom.
    """
    y = np.asarray(series, dtype=float)
    T = len(y)
    if K < 1 or T < 2 * K + 1:
        raise RankDeficientBasis(f"{T} observations cannot identify {K} harmonics")
    X = fourier_design(T, K, P)
    if np.linalg.matrix_rank(X) < 2 * K:
        raise RankDeficientBasis(f"Fourier basis with K={K}, P={P} is rank deficient over {T} days")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    fitted = X @ coef
    dof = T - 2 * K
    s2 = float(((y - fitted) ** 2).sum() / dof)
    se = np.sqrt(s2 * np.diag(np.linalg.inv(X.T @ X)))
    return FourierFit(coef[0::2], coef[1::2], float(P), fitted, se[0::2], se[1::2])


def fit_seasonal_loadings(residuals: np.ndarray, seas: np.ndarray) -> np.ndarray:
    """Per-unit no-intercept slope of ``residuals[i]`` on ``seas``."""
    s = np.asarray(seas, dtype=float)
    ss = float(s @ s)
    if ss <= 1e-300 or not np.any(s):
        raise ZeroSeasonality("seasonal component is identically zero")
    return np.asarray(residuals, dtype=float) @ s / ss


# step 3 -------------------------------------------------------------------


@dataclass(frozen=True)
class ShockFit:
    factor: np.ndarray
    loadings: np.ndarray
    eigenvalue: float
    explained_share: float
    n_iter: int
    diagnostics: tuple[str, ...] = ()


def power_iteration(
    A: np.ndarray, *, tol: float = 1e-10, max_iter: int = 1000, seed: int = 0
) -> tuple[float, np.ndarray, int]:
    """Dominant eigenpair of a symmetric positive semi-definite matrix."""
    n = A.shape[0]
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = float(v @ A @ v)
    for it in range(1, max_iter + 1):
        w = A @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0, v, it
        w /= norm
        lam_new = float(w @ A @ w)
        converged = 1 - abs(float(w @ v)) < tol and abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300)
        v, lam = w, lam_new
        if converged:
            break
    else:
        warnings.warn("power iteration did not converge", stacklevel=2)
    return lam, v, it


def fit_common_shock(residual_matrix: np.ndarray) -> ShockFit:
    """Rank-1 principal component of a days x units residual matrix.

    The score series is scaled to unit sample variance and the loadings carry
    the scale, so ``outer(factor, loadings)`` is the rank-1 approximation.
    Loadings are signed so that they sum to a non-negative number.
    """
    R = np.asarray(residual_matrix, dtype=float)
    T, N = R.shape
    if T < 2 or N < 2:
        raise SwitchbackError(f"need at least 2 days and 2 units, got {R.shape}")
    if not np.isfinite(R).all():
        raise SwitchbackError("residual matrix contains non-finite values")
    C = R.T @ R / (T - 1)
    trace = float(np.trace(C))
    if trace <= 1e-24 * max(1.0, float(np.abs(R).max()) ** 2):
        return ShockFit(np.zeros(T), np.zeros(N), 0.0, 0.0, 0, ("zero residual matrix: no common shock",))
    lam, v, it = power_iteration(C)
    score = R @ v
    sd = float(np.std(score, ddof=1))
    if sd <= 1e-12 * max(1.0, float(np.abs(score).max())):
        return ShockFit(np.zeros(T), np.zeros(N), lam, 0.0, it, ("degenerate common-shock score",))
    factor = score / sd
    loadings = v * sd
    if loadings.sum() < 0:
        factor, loadings = -factor, -loadings
    return ShockFit(factor, loadings, lam, lam / trace, it)


# step 4 -------------------------------------------------------------------


def fit_ar1(series: np.ndarray) -> tuple[float, float]:
    """No-intercept lag-1 regression; ``phi`` clamped to ``[-0.99, 0.99]``.

    ``sigma`` is the sample standard deviation of the one-step prediction
    errors.
    """
    r = np.asarray(series, dtype=float)
    if len(r) < 10:
        raise DegenerateSeries(f"need at least 10 observations, got {len(r)}")
    if np.var(r) <= 1e-24 * max(1.0, float(np.abs(r).max()) ** 2):
        raise DegenerateSeries("series has zero variance")
    lag, cur = r[:-1], r[1:]
    denom = float(lag @ lag)
    phi = float(lag @ cur / denom) if denom > 0 else 0.0
    phi = min(max(phi, -PHI_CAP), PHI_CAP)
    eps = cur - phi * lag
    return phi, float(np.std(eps, ddof=1))


# cross-leg ----------------------------------------------------------------


def _em_1d(
    x: np.ndarray, k: int, seed: int, *, tol: float = 1e-8, max_iter: int = 1000, var_floor: float = 1e-6
) -> GaussianMixture1D:
    labels = lloyd(x[:, None], k, seed).labels
    n = len(x)
    w = np.array([np.mean(labels == j) for j in range(k)])
    m = np.array([x[labels == j].mean() for j in range(k)])
    v = np.array([max(x[labels == j].var(), var_floor) for j in range(k)])
    ll_old = -np.inf
    for _ in range(max_iter):
        logp = -0.5 * (np.log(2 * np.pi * v) + (x[:, None] - m) ** 2 / v) + np.log(w)
        mx = logp.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(logp - mx).sum(axis=1))
        ll = float(lse.sum())
        resp = np.exp(logp - lse[:, None])
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        w = nk / n
        m = (resp * x[:, None]).sum(axis=0) / nk
        v = np.maximum((resp * (x[:, None] - m) ** 2).sum(axis=0) / nk, var_floor)
        if abs(ll - ll_old) <= tol * max(1.0, abs(ll)):
            break
        ll_old = ll
    logp = -0.5 * (np.log(2 * np.pi * v) + (x[:, None] - m) ** 2 / v) + np.log(w)
    mx = logp.max(axis=1, keepdims=True)
    ll = float((mx[:, 0] + np.log(np.exp(logp - mx).sum(axis=1))).sum())
    order = np.argsort(m)
    n_params = 3 * k - 1
    return GaussianMixture1D(
        tuple(float(a) for a in w[order] / w.sum()),
        tuple(float(a) for a in m[order]),
        tuple(float(a) for a in v[order]),
        ll,
        -2 * ll + n_params * math.log(n),
    )


def fit_gaussian_mixture(
    x: np.ndarray, max_components: int, *, n_restarts: int = 5, seed: int = 0
) -> GaussianMixture1D:
    """EM fits for 1..max_components components; lowest BIC wins.

    Each component count is tried from ``n_restarts`` k-means
    initializations and the best likelihood kept.  Counts exceeding the
    number of distinct values are skipped.
    """
    x = np.asarray(x, dtype=float)
    n_distinct = len(np.unique(x))
    best: GaussianMixture1D | None = None
    gen = np.random.default_rng(seed)
    for k in range(1, max_components + 1):
        if k > n_distinct:
            break
        fits = [_em_1d(x, k, int(gen.integers(2**63))) for _ in range(n_restarts if k > 1 else 1)]
        fit = max(fits, key=lambda f: f.log_likelihood)
        if best is None or fit.bic < best.bic:
            best = fit
    assert best is not None
    return best


def fit_cross_leg(
    mu: np.ndarray, sigma: np.ndarray, max_components: int = 3, *, seed: int = 0
) -> tuple[GaussianMixture1D, SigmaModel, tuple[str, ...]]:
    """Mixture over ``log mu`` and the log-linear dispersion model ``log sigma ~ log mu``."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(mu <= 0):
        raise NonPositiveBaseline("all baselines must be positive to model log mu")
    if np.any(sigma <= 0):
        raise NonPositiveBaseline("all innovation scales must be positive to model log sigma")
    if len(mu) < 5:
        raise SwitchbackError(f"need at least 5 units, got {len(mu)}")
    log_mu, log_sigma = np.log(mu), np.log(sigma)
    mixture = fit_gaussian_mixture(log_mu, max_components, seed=seed)
    diagnostics: list[str] = []
    spread = float(np.var(log_mu))
    if spread <= 1e-12:
        diagnostics.append("log mu is constant: slope of the dispersion model set to 0 (collinear)")
        slope = 0.0
        intercept = float(log_sigma.mean())
    else:
        slope, intercept = np.polyfit(log_mu, log_sigma, 1)
        slope, intercept = float(slope), float(intercept)
    resid = log_sigma - intercept - slope * log_mu
    dof = max(len(mu) - (2 if spread > 1e-12 else 1), 1)
    tau = float(np.sqrt(resid @ resid / dof))
    return mixture, SigmaModel(intercept, slope, tau), tuple(diagnostics)


# driver -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CalibrationTrace:
    """Intermediate residuals of each step, kept for inspection and tests."""

    after_dow: np.ndarray
    after_seasonality: np.ndarray
    after_shock: np.ndarray
    fitted_seasonal: np.ndarray


def calibrate(
    panel: PanelDataset,
    K: int = DEFAULT_HARMONICS,
    P: float = DEFAULT_PERIOD,
    *,
    max_components: int = 3,
    seed: int = 0,
    return_trace: bool = False,
) -> GeneratorParams | tuple[GeneratorParams, CalibrationTrace]:
    """Fit every generator component in order, removing each before the next."""
    y = panel.outcomes
    N, T = y.shape
    diagnostics: list[str] = []

    mu, alpha = fit_baselines_and_dow(panel)
    resid = y - mu[:, None] - alpha[panel.day_of_week][None, :]
    after_dow = resid.copy()

    seas_fit = fit_seasonality(resid.mean(axis=0), K, P)
    try:
        gamma = fit_seasonal_loadings(resid, seas_fit.fitted)
    except ZeroSeasonality:
        diagnostics.append("no seasonal signal: loadings set to 0")
        gamma = np.zeros(N)
    resid = resid - gamma[:, None] * seas_fit.fitted[None, :]
    after_seas = resid.copy()

    shock = fit_common_shock(resid.T)
    diagnostics.extend(shock.diagnostics)
    resid = resid - shock.loadings[:, None] * shock.factor[None, :]

    phi = np.zeros(N)
    sigma = np.zeros(N)
    for i in range(N):
        try:
            phi[i], sigma[i] = fit_ar1(resid[i])
        except DegenerateSeries as exc:
            diagnostics.append(f"unit {panel.unit_ids[i]}: {exc}; phi=0, sigma floored")
            phi[i], sigma[i] = 0.0, 0.0
    floor = 1e-9 * max(1.0, float(np.abs(mu).max()))
    if np.any(sigma <= floor):
        sigma = np.maximum(sigma, floor)

    mixture, sigma_model, cross_diag = fit_cross_leg(mu, sigma, max_components, seed=seed)
    diagnostics.extend(cross_diag)

    params = GeneratorParams(
        mu=mu,
        alpha=alpha,
        fourier_a=seas_fit.a,
        fourier_b=seas_fit.b,
        period=float(P),
        gamma=gamma,
        shock_factor=shock.factor,
        shock_loading=shock.loadings,
        ar_phi=phi,
        ar_sigma=sigma,
        mixture=mixture,
        sigma_model=sigma_model,
        start_date=panel.dates[0],
        diagnostics=tuple(diagnostics),
    )
    if return_trace:
        return params, CalibrationTrace(after_dow, after_seas, resid, seas_fit.fitted)
    return params


def naive_sigma(panel: PanelDataset) -> np.ndarray:
    """AR(1) innovation scale fitted on each raw (demeaned) series, for comparison."""
    y = panel.outcomes
    return np.array([fit_ar1(row - row.mean())[1] for row in y])
