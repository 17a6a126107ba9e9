"""Sample synthetic unit-day panels from calibrated generator parameters."""

from __future__ import annotations

import datetime as dt
import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal

from . import seeding
from .calibrate import PHI_CAP, GaussianMixture1D, GeneratorParams, SigmaModel
from .design import AssignmentSchedule
from .errors import DimensionMismatch
from .panel import PanelDataset, daily_calendar


@dataclass(frozen=True)
class Perturbations:
    c_seas: float = 1.0
    c_shock: float = 1.0
    c_ar: float = 1.0

    def __post_init__(self) -> None:
        for name in ("c_seas", "c_shock", "c_ar"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be a finite non-negative number, got {v}")


class Regime(enum.Enum):
    BASELINE = "baseline"
    MORE_SHOCKS = "more-shocks"
    MORE_SEASONALITY = "more-seasonality"
    MORE_AR1 = "more-ar1"


_REGIMES = {
    Regime.BASELINE: Perturbations(1.0, 1.0, 1.0),
    Regime.MORE_SHOCKS: Perturbations(c_seas=1.0, c_shock=2.0, c_ar=1.0),
    Regime.MORE_SEASONALITY: Perturbations(c_seas=2.0, c_shock=1.0, c_ar=1.0),
    Regime.MORE_AR1: Perturbations(c_seas=1.0, c_shock=1.0, c_ar=2.0),
}


def make_regime(params: GeneratorParams | None, regime: Regime | str) -> Perturbations:
    """Multipliers for a named regime: each "more" regime doubles one component."""
    return _REGIMES[Regime(regime)]


def scale_ar_persistence(phi: float, c: float) -> float:
    """Scale ``|phi|`` by ``c``, capped at 0.99, keeping the sign."""
    if abs(phi) >= 1:
        raise ValueError(f"|phi| must be < 1, got {phi}")
    return math.copysign(min(c * abs(phi), PHI_CAP), phi) if phi != 0 else 0.0


@dataclass(frozen=True, eq=False)
class UnitDraws:
    mu: np.ndarray
    sigma: np.ndarray
    phi: np.ndarray
    gamma: np.ndarray
    shock_loading: np.ndarray
    component: np.ndarray | None = None


def sample_units(params: GeneratorParams, N: int, seed: int) -> UnitDraws:
    """Draw a new portfolio of ``N`` units.

    ``log mu`` comes from the mixture and ``log sigma`` from the dispersion
    model, so level and noise stay linked.  ``(phi, gamma, loading)`` are
    resampled jointly, as triples, from the calibration units.
    """
    gen = seeding.rng(seed, "units")
    log_mu, comp = params.mixture.sample(N, gen)
    sm = params.sigma_model
    log_sigma = sm.intercept + sm.slope * log_mu + sm.tau * gen.standard_normal(N)
    pick = gen.integers(params.n_units, size=N)
    return UnitDraws(
        mu=np.exp(log_mu),
        sigma=np.exp(log_sigma),
        phi=params.ar_phi[pick].copy(),
        gamma=params.gamma[pick].copy(),
        shock_loading=params.shock_loading[pick].copy(),
        component=comp,
    )


def calibrated_units(params: GeneratorParams) -> UnitDraws:
    """The calibration units themselves, for regenerating a panel unit by unit."""
    return UnitDraws(
        mu=params.mu.copy(),
        sigma=params.ar_sigma.copy(),
        phi=params.ar_phi.copy(),
        gamma=params.gamma.copy(),
        shock_loading=params.shock_loading.copy(),
    )


def simulate_ar1(phi: np.ndarray, sigma: np.ndarray, T: int, seed: int) -> np.ndarray:
    """Stationary AR(1) paths, one row per unit.

    Each unit draws from its own stream ``mix64(seed, "ar1", i)``, so a
    unit's path does not depend on how many other units are simulated.
    """
    N = len(phi)
    out = np.empty((N, T))
    for i in range(N):
        eps = seeding.rng(seed, "ar1", i).standard_normal(T) * sigma[i]
        eps[0] /= math.sqrt(1 - phi[i] ** 2)
        out[i] = signal.lfilter([1.0], [1.0, -phi[i]], eps)
    return out


def simulate_panel(
    params: GeneratorParams,
    N: int,
    T: int,
    perturb: Perturbations = Perturbations(),
    seed: int = 0,
    *,
    units: UnitDraws | None = None,
    start_date: dt.date | None = None,
) -> tuple[PanelDataset, UnitDraws]:
    """Like :func:`generate_panel` but also returns the unit draws used."""
    if units is None:
        units = sample_units(params, N, seed)
    elif len(units.mu) != N:
        raise DimensionMismatch(f"{len(units.mu)} unit draws for N={N}")
    start = params.start_date if start_date is None else start_date
    dates = daily_calendar(start, T)
    offset = np.arange(T) + (start - params.start_date).days

    phi = np.array([scale_ar_persistence(p, perturb.c_ar) for p in units.phi])
    seas = perturb.c_seas * params.seasonal(offset)
    shock = perturb.c_shock * seeding.rng(seed, "shock").standard_normal(T)
    dow = np.array([d.weekday() for d in dates])
    r = simulate_ar1(phi, units.sigma, T, seed)
    y = (
        units.mu[:, None]
        + params.alpha[dow][None, :]
        + units.gamma[:, None] * seas[None, :]
        + units.shock_loading[:, None] * shock[None, :]
        + r
    )
    panel = PanelDataset(tuple(f"u{i:03d}" for i in range(N)), dates, y)
    return panel, UnitDraws(units.mu, units.sigma, phi, units.gamma, units.shock_loading, units.component)


def generate_panel(
    params: GeneratorParams,
    N: int,
    T: int,
    perturb: Perturbations = Perturbations(),
    seed: int = 0,
    *,
    units: UnitDraws | None = None,
    start_date: dt.date | None = None,
) -> PanelDataset:
    """Simulate an ``N x T`` panel.

    The seasonal curve is scaled by ``c_seas``; the common shock is a fresh
    white-noise path scaled by ``c_shock``; persistence is scaled through
    :func:`scale_ar_persistence`.  AR paths start from their stationary
    distribution.  Pass ``units`` to reuse specific units instead of drawing
    a new portfolio.
    """
    return simulate_panel(params, N, T, perturb, seed, units=units, start_date=start_date)[0]


def inject_uplift(panel: PanelDataset, schedule: AssignmentSchedule, delta: float, seed: int) -> PanelDataset:
    """Multiply treated cells by ``1 + delta + eta`` with ``eta ~ N(0, delta^2)``."""
    if panel.outcomes.shape != schedule.D.shape:
        raise DimensionMismatch(f"panel {panel.outcomes.shape} vs schedule {schedule.D.shape}")
    if delta == 0:
        return panel
    gen = seeding.rng(seed, "uplift")
    eta = gen.normal(0.0, abs(delta), size=panel.outcomes.shape)
    treated = schedule.D.astype(bool)
    y = np.where(treated, panel.outcomes * (1 + delta + eta), panel.outcomes)
    return panel.with_outcomes(y)


# Shipped default parameters ----------------------------------------------

DEFAULT_N_UNITS = 80
DEFAULT_N_DAYS = 366
DEFAULT_START_DATE = dt.date(2024, 1, 1)


@lru_cache(maxsize=1)
def default_params() -> GeneratorParams:
    """A fixed, airline-shaped parameter set for 80 route-level units.

    Not fitted to any real data.  Levels follow a two-mode log-normal mix
    (regional and long-haul routes), dispersion follows a log-linear
    mean-variance law, and seasonality is annual with a mid-year peak.
    """
    gen = np.random.default_rng(20240101)
    N, T = DEFAULT_N_UNITS, DEFAULT_N_DAYS
    mixture = GaussianMixture1D(weights=(0.6, 0.4), means=(math.log(1500.0), math.log(5000.0)), variances=(0.09, 0.09))
    sigma_model = SigmaModel(intercept=0.45, slope=0.8, tau=0.15)
    log_mu, _ = mixture.sample(N, gen)
    mu = np.exp(log_mu)
    sigma = np.exp(sigma_model.intercept + sigma_model.slope * log_mu + sigma_model.tau * gen.standard_normal(N))
    phi = np.clip(gen.normal(0.08, 0.04, N), 0.0, 0.3)
    gamma = np.clip(gen.normal(1.0, 0.6, N), -0.5, None)
    loading = np.abs(gen.normal(60.0, 30.0, N))
    shock = gen.standard_normal(T)
    shock = (shock - shock.mean()) / shock.std(ddof=1)
    alpha = np.array([-40.0, -60.0, -30.0, 10.0, 70.0, 20.0, 30.0])
    return GeneratorParams(
        mu=mu,
        alpha=alpha - alpha.mean(),
        fourier_a=np.array([150.0, 60.0, 20.0]),
        fourier_b=np.array([-250.0, 40.0, -30.0]),
        period=365.25,
        gamma=gamma,
        shock_factor=shock,
        shock_loading=loading,
        ar_phi=phi,
        ar_sigma=sigma,
        mixture=mixture,
        sigma_model=sigma_model,
        start_date=DEFAULT_START_DATE,
        diagnostics=("hand-set default parameters",),
    )
