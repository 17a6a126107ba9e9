"""Two-way fixed-effects estimation with cluster-robust inference.

The treatment effect is estimated from the two-way demeaned outcome and
treatment, ``Y** = beta * D** + e**``, which on a balanced panel is
numerically identical to OLS with a full set of unit and day dummies.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .design import AssignmentSchedule
from .errors import DimensionMismatch, NotIdentified, SingleCluster
from .panel import PanelDataset

IDENTIFICATION_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TwfeFit:
    beta_hat: float
    se: float
    t_stat: float
    p_value: float
    regressor_mass: float
    residuals: np.ndarray = field(repr=False)
    d_star: np.ndarray = field(repr=False)
    n_clusters: int
    design: str | None = None
    horizon_days: int | None = None

    def report(self) -> dict:
        return {
            "beta_hat": self.beta_hat,
            "se": self.se,
            "t": self.t_stat,
            "p": self.p_value,
            "n_clusters": self.n_clusters,
            "regressor_mass": self.regressor_mass,
            "design": self.design,
            "horizon_days": self.horizon_days,
        }

    def to_json(self) -> str:
        return json.dumps(self.report(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class AutocovSpec:
    gamma0: float
    rho: Sequence[float] = ()

    def __post_init__(self) -> None:
        if self.gamma0 < 0:
            raise ValueError("gamma0 must be non-negative")
        if any(abs(r) > 1 for r in self.rho):
            raise ValueError("autocorrelations must lie in [-1, 1]")


def double_demean(M: np.ndarray) -> np.ndarray:
    """``M - row means - column means + grand mean``."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        raise ValueError("empty matrix")
    return M - M.mean(axis=1, keepdims=True) - M.mean(axis=0, keepdims=True) + M.mean()


def within_transform(
    M: np.ndarray, weights: np.ndarray | None = None, *, tol: float = 1e-10, max_iter: int = 10_000
) -> np.ndarray:
    """Two-way residualization by alternating projections.

    With ``weights`` (1 = observed, 0 = missing) this handles unbalanced
    panels; for a full panel it converges after one sweep to
    :func:`double_demean`.
    """
    M = np.asarray(M, dtype=float)
    w = np.ones_like(M) if weights is None else np.asarray(weights, dtype=float)
    out = np.where(w > 0, M, 0.0)
    row_n = np.maximum(w.sum(axis=1, keepdims=True), 1)
    col_n = np.maximum(w.sum(axis=0, keepdims=True), 1)
    for _ in range(max_iter):
        prev = out
        out = out - (out * w).sum(axis=1, keepdims=True) / row_n * (w > 0)
        out = out - (out * w).sum(axis=0, keepdims=True) / col_n * (w > 0)
        if np.abs(out - prev).max() < tol:
            break
    return out


def cluster_robust_variance(
    d_star: np.ndarray, residuals: np.ndarray, cluster_of: np.ndarray, n_params: int
) -> tuple[float, int]:
    """Sandwich variance of the single-regressor coefficient and the cluster count.

    Scaled by ``G/(G-1) * (M-1)/(M-p)`` with ``M`` observations and
    ``p = n_params``.
    """
    x = np.ravel(d_star)
    e = np.ravel(residuals)
    g = np.ravel(cluster_of)
    codes, inverse = np.unique(g, return_inverse=True)
    G = len(codes)
    if G < 2:
        raise SingleCluster("cluster-robust variance needs at least two clusters")
    scores = np.bincount(inverse, weights=x * e, minlength=G)
    mass = float(x @ x)
    M = x.size
    if M <= n_params:
        raise NotIdentified(f"{M} observations leave no residual degrees of freedom for {n_params} parameters")
    meat = float(scores @ scores)
    factor = G / (G - 1) * (M - 1) / (M - n_params)
    return factor * meat / mass**2, G


def _cluster_matrix(cluster_of: np.ndarray | None, N: int, T: int) -> np.ndarray:
    if cluster_of is None:
        return np.broadcast_to(np.arange(N)[:, None], (N, T))
    c = np.asarray(cluster_of)
    if c.ndim == 1 and c.shape[0] == N:
        return np.broadcast_to(c[:, None], (N, T))
    if c.shape != (N, T):
        raise DimensionMismatch(f"cluster ids shape {c.shape} matches neither ({N},) nor ({N}, {T})")
    return c


def _fit_arrays(
    Y: np.ndarray, D: np.ndarray, cluster_of: np.ndarray | None = None
) -> tuple[float, float, float, np.ndarray, np.ndarray, int]:
    N, T = Y.shape
    d_star = double_demean(D)
    mass = float((d_star * d_star).sum())
    if mass < IDENTIFICATION_TOL:
        raise NotIdentified(
            "treatment has no variation left after removing unit and day effects (synchronized or constant)"
        )
    y_star = double_demean(Y)
    beta = float((y_star * d_star).sum() / mass)
    resid = y_star - beta * d_star
    var, G = cluster_robust_variance(d_star, resid, _cluster_matrix(cluster_of, N, T), N + T)
    return beta, float(np.sqrt(var)), mass, resid, d_star, G


def _inference(beta: float, se: float, n_clusters: int) -> tuple[float, float]:
    if se > 0:
        t = beta / se
        p = float(2 * stats.t.sf(abs(t), n_clusters - 1))
    else:
        t = 0.0 if beta == 0 else float(np.copysign(np.inf, beta))
        p = 1.0 if beta == 0 else 0.0
    return t, min(max(p, 0.0), 1.0)


def twfe_arrays(Y: np.ndarray, D: np.ndarray, cluster_of: np.ndarray | None = None) -> TwfeFit:
    """TWFE fit on raw arrays (units x days); clusters default to units."""
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    if Y.shape != D.shape:
        raise DimensionMismatch(f"outcome shape {Y.shape} != treatment shape {D.shape}")
    beta, se, mass, resid, d_star, G = _fit_arrays(Y, D, cluster_of)
    t, p = _inference(beta, se, G)
    return TwfeFit(beta, se, t, p, mass, resid, d_star, G)


def twfe_fit(
    panel: PanelDataset, schedule: AssignmentSchedule, cluster_of: np.ndarray | None = None
) -> TwfeFit:
    """Estimate the treatment effect of ``schedule`` on ``panel``.

    ``cluster_of`` gives a cluster id per (unit, day) cell; by default each
    unit is its own cluster.  p-values use a Student-t reference with
    ``G - 1`` degrees of freedom.
    """
    if panel.outcomes.shape != schedule.D.shape:
        raise DimensionMismatch(f"panel {panel.outcomes.shape} vs schedule {schedule.D.shape}")
    fit = twfe_arrays(panel.outcomes, schedule.D, cluster_of)
    return TwfeFit(
        fit.beta_hat,
        fit.se,
        fit.t_stat,
        fit.p_value,
        fit.regressor_mass,
        fit.residuals,
        fit.d_star,
        fit.n_clusters,
        design=schedule.design.value,
        horizon_days=schedule.horizon_days,
    )


def cluster_robust_se(fit: TwfeFit, cluster_of: np.ndarray) -> float:
    """Recompute the standard error of ``fit`` under another clustering.

    ``cluster_of`` is either one id per unit or one id per (unit, day) cell.
    """
    N, T = fit.residuals.shape
    var, _ = cluster_robust_variance(fit.d_star, fit.residuals, _cluster_matrix(cluster_of, N, T), N + T)
    return float(np.sqrt(var))


def effective_sample_variance(spec: AutocovSpec, T: int) -> float:
    """Variance of a length-``T`` sample mean of a stationary series.

    ``gamma0 / T * (1 + 2 * sum_{k<T} (1 - k/T) rho_k)``; autocorrelations
    beyond those supplied count as zero.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    rho = np.zeros(max(T - 1, 0))
    given = np.asarray(spec.rho, dtype=float)[: T - 1]
    rho[: len(given)] = given
    k = np.arange(1, T)
    return float(spec.gamma0 / T * (1 + 2 * np.sum((1 - k / T) * rho)))


def diff_variance(gamma0: float, gamma_h: float) -> float:
    """Variance of ``x[t+h] - x[t]`` for a stationary series: ``2*gamma0 - 2*gamma_h``."""
    if abs(gamma_h) > gamma0:
        raise ValueError("|gamma_h| cannot exceed gamma0")
    return 2 * gamma0 - 2 * gamma_h
