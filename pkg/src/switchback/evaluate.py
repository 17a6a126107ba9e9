"""Monte Carlo comparison of fixed-pod and switchback designs.

For every dataset, random pod split, design, horizon and weekly start date
the harness builds a schedule, fits the two-way fixed-effects model and
records the estimate, its cluster-robust standard error and whether the
null was rejected.  Replications are keyed by their coordinates, so the
aggregated report does not depend on execution order or worker count.

Windows: a horizon of ``h`` weeks is the treatment period.  Fixed pods get
an all-control pre period of the same length in front of it (window of
``2h`` weeks); switchbacks run over the treatment period only, i.e. the
second half of the same window.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import os
from collections import defaultdict
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import seeding
from .calibrate import GeneratorParams
from .design import (
    AssignmentSchedule,
    PodAssignment,
    default_k,
    fixed_assignment,
    stratified_pods,
    switchback_assignment,
)
from .errors import HorizonTooLong, NonPositiveSE, SwitchbackError
from .estimate import twfe_arrays
from .generate import Perturbations, Regime, generate_panel, inject_uplift, make_regime
from .panel import PanelDataset


class Design(enum.Enum):
    FIXED = "FixedPods"
    WEEKLY = "WeeklySB"
    DAILY = "DailySB"


DESIGN_ALIASES = {
    "fixed": Design.FIXED,
    "fixedpods": Design.FIXED,
    "weekly": Design.WEEKLY,
    "weeklysb": Design.WEEKLY,
    "daily": Design.DAILY,
    "dailysb": Design.DAILY,
}

# Comparison pairs reported as SE reductions: (design, baseline).
SE_PAIRS = ((Design.WEEKLY, Design.FIXED), (Design.DAILY, Design.FIXED), (Design.DAILY, Design.WEEKLY))


def parse_design(name: str | Design) -> Design:
    if isinstance(name, Design):
        return name
    try:
        return DESIGN_ALIASES[name.lower().replace("_", "").replace("-", "").replace(" ", "")]
    except KeyError:
        raise SwitchbackError(f"unknown design {name!r}") from None


@dataclass(frozen=True)
class ExperimentPlan:
    designs: tuple[Design, ...] = (Design.FIXED, Design.WEEKLY, Design.DAILY)
    horizons_weeks: tuple[int, ...] = (2, 4, 6, 8, 10, 12, 14, 16)
    n_dataset_reps: int = 20
    n_splits_per_dataset: int = 10
    uplift_delta: float = 0.03
    alpha: float = 0.05
    regime: Regime = Regime.BASELINE
    master_seed: int = 0
    n_strata: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "designs", tuple(parse_design(d) for d in self.designs))
        object.__setattr__(self, "horizons_weeks", tuple(int(h) for h in self.horizons_weeks))
        object.__setattr__(self, "regime", Regime(self.regime))
        if not self.designs:
            raise SwitchbackError("at least one design is required")
        if any(h < 2 or h % 2 for h in self.horizons_weeks):
            raise SwitchbackError(f"horizons must be even and at least 2 weeks, got {self.horizons_weeks}")
        if not 0 <= self.alpha < 1:
            raise SwitchbackError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.n_dataset_reps < 1 or self.n_splits_per_dataset < 1:
            raise SwitchbackError("replication counts must be at least 1")


def start_date_grid(calendar_length_days: int, horizon_days: int) -> list[int]:
    """Weekly start offsets at which a window of ``horizon_days`` fits the calendar."""
    if horizon_days <= 0:
        raise SwitchbackError("horizon must be positive")
    if horizon_days > calendar_length_days:
        raise HorizonTooLong(f"horizon {horizon_days} exceeds calendar of {calendar_length_days} days")
    return list(range(0, calendar_length_days - horizon_days + 1, 7))


def window_days(design: Design, horizon_weeks: int) -> int:
    """Calendar days the experiment occupies, including any pre period."""
    return 14 * horizon_weeks


def se_reduction(se_design: float, se_baseline: float) -> float:
    """Percent reduction ``100 * (1 - se_design / se_baseline)``; negative when worse."""
    if not se_design > 0 or not se_baseline > 0:
        raise NonPositiveSE(f"standard errors must be positive, got {se_design}, {se_baseline}")
    return 100.0 * (1.0 - se_design / se_baseline)


def binomial_ci(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Clopper-Pearson interval for a proportion."""
    if n == 0:
        return (0.0, 1.0)
    ci = stats.binomtest(k, n).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


# panel sources ------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSource:
    """Fresh synthetic panels from generator parameters, one per dataset index."""

    params: GeneratorParams
    n_units: int = 80
    n_days: int = 366
    perturb: Perturbations = Perturbations()

    def __call__(self, dataset_index: int, seed: int) -> PanelDataset:
        return generate_panel(self.params, self.n_units, self.n_days, self.perturb, seed)


@dataclass(frozen=True)
class FixedSource:
    """The same observed panel for every dataset index (real-data protocol)."""

    panel: PanelDataset

    def __call__(self, dataset_index: int, seed: int) -> PanelDataset:
        return self.panel


PanelSource = Callable[[int, int], PanelDataset]


def synthetic_source(params: GeneratorParams, plan: ExperimentPlan, n_units: int = 80, n_days: int = 366) -> SyntheticSource:
    return SyntheticSource(params, n_units, n_days, make_regime(params, plan.regime))


def _as_source(source: PanelSource | PanelDataset) -> PanelSource:
    return FixedSource(source) if isinstance(source, PanelDataset) else source


def pod_features(panel: PanelDataset) -> tuple[np.ndarray, tuple[str, ...]]:
    """Per-unit level and volatility used to stratify the pod split."""
    y = panel.outcomes
    return np.column_stack([y.mean(axis=1), y.std(axis=1)]), ("mean_outcome", "sd_outcome")


# replications -------------------------------------------------------------


@dataclass(frozen=True)
class Replication:
    dataset: int
    split: int
    design: Design
    horizon_weeks: int
    start: int
    beta_hat: float
    se: float
    p_value: float
    reject: bool
    failed: str | None = None

    @property
    def key(self) -> tuple:
        return (self.design.value, self.horizon_weeks, self.dataset, self.split, self.start)


def _schedule(design: Design, pods: PodAssignment, horizon_weeks: int, seed: int):
    h = 7 * horizon_weeks
    if design is Design.FIXED:
        return fixed_assignment(pods, 2 * h, seed)
    block = 7 if design is Design.WEEKLY else 1
    return switchback_assignment(pods, h, block, seed)


def _run_dataset(
    source: PanelSource, plan: ExperimentPlan, dataset: int, uplift: float
) -> list[Replication]:
    seed = plan.master_seed
    panel = source(dataset, seeding.mix64(seed, "dataset", dataset))
    feats, names = pod_features(panel)
    k = plan.n_strata if plan.n_strata is not None else default_k(panel.n_units)
    grids = {h: start_date_grid(panel.n_days, window_days(Design.FIXED, h)) for h in plan.horizons_weeks}
    out = []
    for split in range(plan.n_splits_per_dataset):
        pods = stratified_pods(
            feats, k, seeding.mix64(seed, "pods", dataset, split), unit_ids=panel.unit_ids, feature_names=names
        )
        for design in plan.designs:
            for h in plan.horizons_weeks:
                for start in grids[h]:
                    rep_seed = seeding.mix64(seed, dataset, split, design.value, h, start)
                    sched = _schedule(design, pods, h, rep_seed)
                    offset = start if design is Design.FIXED else start + 7 * h
                    y = panel.outcomes[:, offset : offset + sched.horizon_days]
                    if uplift:
                        win = panel.window(offset, sched.horizon_days)
                        y = inject_uplift(win, _aligned(sched, win), uplift, rep_seed).outcomes
                    try:
                        fit = twfe_arrays(y, sched.D)
                    except SwitchbackError as exc:
                        out.append(
                            Replication(dataset, split, design, h, start, math.nan, math.nan, math.nan, False, type(exc).__name__)
                        )
                        continue
                    out.append(
                        Replication(
                            dataset, split, design, h, start, fit.beta_hat, fit.se, fit.p_value, fit.p_value < plan.alpha
                        )
                    )
    return out


def _aligned(schedule: AssignmentSchedule, panel: PanelDataset) -> AssignmentSchedule:
    # Schedules are built on a nominal calendar; re-date them to the window.
    return replace(schedule, unit_ids=panel.unit_ids, dates=panel.dates)


def run_replications(
    source: PanelSource | PanelDataset, plan: ExperimentPlan, *, uplift: float = 0.0, jobs: int | None = 1
) -> list[Replication]:
    """Run every replication of ``plan``; results are sorted by replication key."""
    source = _as_source(source)
    datasets = range(plan.n_dataset_reps)
    jobs = jobs or os.cpu_count() or 1
    if jobs <= 1 or plan.n_dataset_reps == 1:
        results = [r for d in datasets for r in _run_dataset(source, plan, d, uplift)]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, plan.n_dataset_reps)) as pool:
            chunks = pool.map(_run_dataset, [source] * len(datasets), [plan] * len(datasets), datasets, [uplift] * len(datasets))
            results = [r for chunk in chunks for r in chunk]
    design_order = {d: i for i, d in enumerate(Design)}
    results.sort(key=lambda r: (design_order[r.design], r.horizon_weeks, r.dataset, r.split, r.start))
    return results


# report -------------------------------------------------------------------


@dataclass(frozen=True)
class CellSummary:
    design: str
    horizon_weeks: int
    n: int
    n_failed: int
    mean_beta: float
    sd_beta: float
    mean_se: float
    rejection_rate: float
    ci_lo: float
    ci_hi: float
    mean_beta_ci: tuple[float, float]


@dataclass(frozen=True)
class Reduction:
    design: str
    baseline: str
    horizon_weeks: int
    by_sd: float
    by_mean_se: float


@dataclass(frozen=True)
class EvaluationReport:
    suite: str
    regime: str
    alpha: float
    uplift_delta: float
    cells: tuple[CellSummary, ...]
    reductions: tuple[Reduction, ...]
    replications: tuple[Replication, ...] = field(default=(), repr=False, compare=False)

    def cell(self, design: Design | str, horizon_weeks: int) -> CellSummary:
        name = parse_design(design).value
        for c in self.cells:
            if c.design == name and c.horizon_weeks == horizon_weeks:
                return c
        raise KeyError((name, horizon_weeks))

    def reduction(self, design: Design | str, baseline: Design | str, horizon_weeks: int) -> Reduction:
        a, b = parse_design(design).value, parse_design(baseline).value
        for r in self.reductions:
            if (r.design, r.baseline, r.horizon_weeks) == (a, b, horizon_weeks):
                return r
        raise KeyError((a, b, horizon_weeks))

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "regime": self.regime,
            "alpha": self.alpha,
            "uplift_delta": self.uplift_delta,
            "cells": {f"{c.design}/{c.horizon_weeks}": asdict(c) for c in self.cells},
            "se_reduction_pct": {
                f"{r.design}_vs_{r.baseline}/{r.horizon_weeks}": {"by_sd": r.by_sd, "by_mean_se": r.by_mean_se}
                for r in self.reductions
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    def to_csv(self) -> str:
        """Long format ``regime,design,horizon_weeks,metric,value,ci_lo,ci_hi``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["regime", "design", "horizon_weeks", "metric", "value", "ci_lo", "ci_hi"])
        rate_name = "type1_error" if self.suite == "aa" else "power"
        for c in self.cells:
            w.writerow([self.regime, c.design, c.horizon_weeks, "mean_se", repr(c.mean_se), "", ""])
            w.writerow([self.regime, c.design, c.horizon_weeks, "sd_beta", repr(c.sd_beta), "", ""])
            w.writerow([self.regime, c.design, c.horizon_weeks, "mean_beta", repr(c.mean_beta), repr(c.mean_beta_ci[0]), repr(c.mean_beta_ci[1])])
            w.writerow([self.regime, c.design, c.horizon_weeks, rate_name, repr(c.rejection_rate), repr(c.ci_lo), repr(c.ci_hi)])
            w.writerow([self.regime, c.design, c.horizon_weeks, "n", c.n, "", ""])
        for r in self.reductions:
            pair = f"{r.design}_vs_{r.baseline}"
            w.writerow([self.regime, pair, r.horizon_weeks, "se_reduction_pct", repr(r.by_sd), "", ""])
            w.writerow([self.regime, pair, r.horizon_weeks, "se_reduction_pct_mean_se", repr(r.by_mean_se), "", ""])
        return buf.getvalue()

    def summary(self) -> str:
        """Plain-text tables: rejection rates by design and horizon, then SE reductions."""
        horizons = sorted({c.horizon_weeks for c in self.cells})
        designs = [d.value for d in Design if any(c.design == d.value for c in self.cells)]
        rate = "Type I error (%)" if self.suite == "aa" else "Power (%)"
        head = f"{'Design':<12}" + "".join(f"{f'{h} wk':>10}" for h in horizons)
        lines = [f"[{self.suite.upper()}] regime={self.regime}  {rate}", head]
        for d in designs:
            lines.append(f"{d:<12}" + "".join(f"{100 * self.cell(d, h).rejection_rate:>10.1f}" for h in horizons))
        lines += ["", "SE reduction (%), empirical sd of the estimate", head.replace("Design      ", "Comparison  ")]
        pairs = [(a.value, b.value) for a, b in SE_PAIRS if a.value in designs and b.value in designs]
        for a, b in pairs:
            label = f"{a} vs {b}"
            lines.append(f"{label:<12}" + "".join(f"{self.reduction(a, b, h).by_sd:>10.1f}" for h in horizons))
        lines += ["", "Mean estimated SE"]
        for d in designs:
            lines.append(f"{d:<12}" + "".join(f"{self.cell(d, h).mean_se:>10.4g}" for h in horizons))
        return "\n".join(lines) + "\n"


def summarize(replications: Sequence[Replication], suite: str, plan: ExperimentPlan) -> EvaluationReport:
    groups: dict[tuple[str, int], list[Replication]] = defaultdict(list)
    for r in replications:
        groups[(r.design.value, r.horizon_weeks)].append(r)
    cells = []
    for (design, h), reps in sorted(groups.items(), key=lambda kv: ([d.value for d in Design].index(kv[0][0]), kv[0][1])):
        ok = [r for r in reps if r.failed is None]
        beta = np.array([r.beta_hat for r in ok])
        se = np.array([r.se for r in ok])
        k = sum(r.reject for r in ok)
        n = len(ok)
        lo, hi = binomial_ci(k, n)
        sd = float(beta.std(ddof=1)) if n > 1 else math.nan
        mean_beta = float(beta.mean()) if n else math.nan
        half = 1.96 * sd / math.sqrt(n) if n > 1 else math.nan
        cells.append(
            CellSummary(
                design, h, n, len(reps) - n, mean_beta, sd, float(se.mean()) if n else math.nan,
                k / n if n else math.nan, lo, hi, (mean_beta - half, mean_beta + half),
            )
        )
    report = EvaluationReport(suite, plan.regime.value, plan.alpha, plan.uplift_delta if suite == "ab" else 0.0, tuple(cells), (), tuple(replications))
    reductions = []
    for a, b in SE_PAIRS:
        if a not in plan.designs or b not in plan.designs:
            continue
        for h in plan.horizons_weeks:
            ca, cb = report.cell(a, h), report.cell(b, h)
            try:
                reductions.append(Reduction(a.value, b.value, h, se_reduction(ca.sd_beta, cb.sd_beta), se_reduction(ca.mean_se, cb.mean_se)))
            except NonPositiveSE:
                reductions.append(Reduction(a.value, b.value, h, math.nan, math.nan))
    return EvaluationReport(report.suite, report.regime, report.alpha, report.uplift_delta, report.cells, tuple(reductions), report.replications)


def run_aa_suite(source: PanelSource | PanelDataset, plan: ExperimentPlan, *, jobs: int | None = 1) -> EvaluationReport:
    """A/A tests: no effect injected; the rejection rate is the empirical Type I error."""
    return summarize(run_replications(source, plan, uplift=0.0, jobs=jobs), "aa", plan)


def run_ab_suite(source: PanelSource | PanelDataset, plan: ExperimentPlan, *, jobs: int | None = 1) -> EvaluationReport:
    """A/B tests with multiplicative uplift ``plan.uplift_delta``; the rejection rate is power."""
    return summarize(run_replications(source, plan, uplift=plan.uplift_delta, jobs=jobs), "ab", plan)


def write_reports(reports: Sequence[EvaluationReport], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rep in reports:
        stem = f"{rep.suite}_{rep.regime}"
        for suffix, text in ((".json", rep.to_json()), (".csv", rep.to_csv()), (".txt", rep.summary())):
            path = out / f"{stem}{suffix}"
            path.write_text(text)
            written.append(path)
    return written
