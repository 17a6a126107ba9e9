"""Treatment assignment: stratified pods, fixed pods and switchback schedules."""

from __future__ import annotations

import csv
import datetime as dt
import enum
import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateFeatures, DesignError, InputError, OddHorizon, TooFewUnits
from .panel import daily_calendar

DEFAULT_START = dt.date(2024, 1, 1)


class DesignKind(enum.Enum):
    FIXED_PODS = "FixedPods"
    SWITCHBACK = "Switchback"


@dataclass(frozen=True, eq=False)
class AssignmentSchedule:
    design: DesignKind
    block_length_days: int
    D: np.ndarray
    unit_ids: tuple[str, ...]
    dates: tuple[dt.date, ...]
    pre_period_days: int = 0

    def __post_init__(self) -> None:
        d = np.array(self.D, dtype=np.int8)
        d.flags.writeable = False
        object.__setattr__(self, "D", d)
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "dates", tuple(self.dates))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AssignmentSchedule):
            return NotImplemented
        return (
            self.design == other.design
            and self.block_length_days == other.block_length_days
            and self.pre_period_days == other.pre_period_days
            and self.unit_ids == other.unit_ids
            and self.dates == other.dates
            and np.array_equal(self.D, other.D)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def horizon_days(self) -> int:
        return self.D.shape[1]


@dataclass(frozen=True)
class PodAssignment:
    """Per-unit pod labels (``"A"``/``"B"``) and the stratum each unit came from."""

    pod: tuple[str, ...]
    cluster: tuple[int, ...]
    feature_names: tuple[str, ...]
    unit_ids: tuple[str, ...]
    diagnostics: tuple[str, ...] = field(default=(), compare=False)

    @property
    def in_a(self) -> np.ndarray:
        return np.array([p == "A" for p in self.pod])


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    objective_history: tuple[float, ...]
    n_iter: int

    @property
    def objective(self) -> float:
        return self.objective_history[-1]


def _sq_dist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp(points: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    n = len(points)
    idx = [int(gen.integers(n))]
    d2 = ((points - points[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # Fewer distinct points than clusters: pick unused indices.
            rest = np.setdiff1d(np.arange(n), idx)
            nxt = int(gen.choice(rest))
        else:
            nxt = int(gen.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[idx].copy()


def lloyd(
    points: np.ndarray, k: int, seed: int, *, tol: float = 1e-8, max_iter: int = 300
) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when the relative objective change drops below ``tol`` or after
    ``max_iter`` iterations.  An empty cluster is re-seeded with the point
    farthest from its current centre, which never increases the objective.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if not 1 <= k <= n:
        raise DesignError(f"k={k} must be between 1 and the number of points ({n})")
    gen = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, gen)
    d2 = _sq_dist(x, centers)
    labels = d2.argmin(axis=1)
    history = [float(d2[np.arange(n), labels].sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                own = d2[np.arange(n), labels]
                far = int(own.argmax())
                centers[j] = x[far]
                labels[far] = j
        d2 = _sq_dist(x, centers)
        labels = d2.argmin(axis=1)
        obj = float(d2[np.arange(n), labels].sum())
        history.append(obj)
        prev = history[-2]
        if prev == 0 or abs(prev - obj) / prev < tol:
            break
    return KMeansResult(labels=labels, centers=centers, objective_history=tuple(history), n_iter=n_iter)


def kmeans(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Cluster labels in ``0..k-1`` for each row of ``points``."""
    return lloyd(points, k, seed).labels


def default_k(n_units: int) -> int:
    return max(2, n_units // 10)


def stratified_pods(
    features: np.ndarray,
    k: int | None,
    seed: int,
    *,
    unit_ids: Sequence[str] | None = None,
    feature_names: Sequence[str] | None = None,
) -> PodAssignment:
    """Standardize features, cluster with k-means, split every cluster evenly into pods.

    Odd-sized clusters alternate which pod receives the extra unit (starting
    pod chosen at random) so the overall pod sizes differ by at most one.
    Zero-variance columns are dropped with a diagnostic.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if n < 2:
        raise TooFewUnits(f"need at least 2 units, got {n}")
    if not np.isfinite(x).all():
        raise InputError("features contain non-finite values")
    k = default_k(n) if k is None else k
    if not 1 <= k <= n:
        raise TooFewUnits(f"k={k} exceeds the number of units ({n})")
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{j}" for j in range(x.shape[1]))
    ids = tuple(unit_ids) if unit_ids is not None else tuple(str(i) for i in range(n))

    sd = x.std(axis=0)
    degenerate = sd <= 1e-12 * np.maximum(1.0, np.abs(x).max(axis=0))
    diagnostics = tuple(f"dropped zero-variance feature {names[j]!r}" for j in np.flatnonzero(degenerate))
    for msg in diagnostics:
        warnings.warn(msg, stacklevel=2)

    gen = np.random.default_rng(seed)
    if degenerate.all():
        if k > 1:
            raise DegenerateFeatures("every feature column has zero variance")
        labels = np.zeros(n, dtype=int)
    else:
        z = (x[:, ~degenerate] - x[:, ~degenerate].mean(axis=0)) / sd[~degenerate]
        labels = lloyd(z, k, int(gen.integers(2**63))).labels

    pod = np.empty(n, dtype=object)
    extra_to_a = bool(gen.integers(2))
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[gen.permutation(len(members))]
        n_a = len(members) // 2
        if len(members) % 2:
            n_a += int(extra_to_a)
            extra_to_a = not extra_to_a
        pod[members[:n_a]] = "A"
        pod[members[n_a:]] = "B"
    return PodAssignment(
        pod=tuple(pod), cluster=tuple(int(c) for c in labels), feature_names=names, unit_ids=ids, diagnostics=diagnostics
    )


def random_pods(n_units: int, seed: int, unit_ids: Sequence[str] | None = None) -> PodAssignment:
    """Unstratified even split, the comparison baseline for :func:`stratified_pods`."""
    gen = np.random.default_rng(seed)
    order = gen.permutation(n_units)
    pod = np.empty(n_units, dtype=object)
    pod[order[: n_units // 2]] = "A"
    pod[order[n_units // 2 :]] = "B"
    ids = tuple(unit_ids) if unit_ids is not None else tuple(str(i) for i in range(n_units))
    return PodAssignment(pod=tuple(pod), cluster=(0,) * n_units, feature_names=(), unit_ids=ids)


def fixed_assignment(
    pods: PodAssignment, horizon_days: int, seed: int, *, start_date: dt.date = DEFAULT_START
) -> AssignmentSchedule:
    """First half of the window is an all-control pre period; in the second half
    one pod (coin flip) is treated throughout."""
    if horizon_days <= 0 or horizon_days % 2:
        raise OddHorizon(f"horizon_days must be a positive even integer, got {horizon_days}")
    pre = horizon_days // 2
    a_treated = bool(np.random.default_rng(seed).integers(2))
    treated = pods.in_a if a_treated else ~pods.in_a
    D = np.zeros((len(pods.pod), horizon_days), dtype=np.int8)
    D[treated, pre:] = 1
    return AssignmentSchedule(
        design=DesignKind.FIXED_PODS,
        block_length_days=horizon_days,
        D=D,
        unit_ids=pods.unit_ids,
        dates=daily_calendar(start_date, horizon_days),
        pre_period_days=pre,
    )


def switchback_assignment(
    pods: PodAssignment,
    horizon_days: int,
    block_length_days: int,
    seed: int,
    *,
    start_date: dt.date = DEFAULT_START,
) -> AssignmentSchedule:
    """Alternate treatment in blocks, pods A and B in opposite phase.

    A short final block is kept when the horizon is not a multiple of the
    block length.
    """
    if block_length_days <= 0 or horizon_days <= 0:
        raise DesignError("horizon and block length must be positive")
    if block_length_days > horizon_days:
        raise DesignError(f"block length {block_length_days} exceeds horizon {horizon_days}")
    a_first = bool(np.random.default_rng(seed).integers(2))
    block = np.arange(horizon_days) // block_length_days
    a_on = (block % 2 == 0) if a_first else (block % 2 == 1)
    D = np.where(pods.in_a[:, None], a_on[None, :], ~a_on[None, :]).astype(np.int8)
    return AssignmentSchedule(
        design=DesignKind.SWITCHBACK,
        block_length_days=block_length_days,
        D=D,
        unit_ids=pods.unit_ids,
        dates=daily_calendar(start_date, horizon_days),
        pre_period_days=0,
    )


def n_blocks(horizon_days: int, block_length_days: int) -> int:
    return math.ceil(horizon_days / block_length_days)


def schedule_violations(schedule: AssignmentSchedule) -> list[str]:
    """Check the structural invariants of a schedule; empty list when all hold."""
    D = schedule.D
    out = []
    if not np.isin(D, (0, 1)).all():
        out.append("D has entries outside {0, 1}")
    if D.shape != (len(schedule.unit_ids), len(schedule.dates)):
        out.append(f"D shape {D.shape} does not match units x dates")
    if schedule.design is DesignKind.SWITCHBACK:
        L = schedule.block_length_days
        starts = np.arange(0, D.shape[1], L)
        blocks = np.stack([D[:, s] for s in starts], axis=1)
        for s in starts:
            if not (D[:, s : s + L] == D[:, [s]]).all():
                out.append(f"status not constant within block starting at day {s}")
        if blocks.shape[1] > 1 and (blocks[:, 1:] == blocks[:, :-1]).any():
            out.append("consecutive blocks do not alternate")
        per_unit = np.abs(2 * blocks.sum(axis=1) - blocks.shape[1])
        if (per_unit > 1).any():
            out.append("per-unit treated/control block counts differ by more than one")
        per_block = np.abs(2 * blocks.sum(axis=0) - blocks.shape[0])
        if (per_block > 1).any():
            out.append("per-block treated/control unit counts differ by more than one")
    else:
        pre = schedule.pre_period_days
        if D[:, :pre].any():
            out.append("treatment during the pre period")
        post = D[:, pre:]
        if post.size and not (post == post[:, [0]]).all():
            out.append("post-period rows are not constant")
    return out


def write_schedule_csv(schedule: AssignmentSchedule, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "date", "treated"])
        for i, unit in enumerate(schedule.unit_ids):
            for t, day in enumerate(schedule.dates):
                w.writerow([unit, day.isoformat(), int(schedule.D[i, t])])


def read_schedule_csv(path: str | Path) -> AssignmentSchedule:
    """Read ``unit,date,treated``.  The design is inferred from the matrix:
    rows that never switch mean fixed pods, anything else is a switchback."""
    cells: dict[tuple[str, dt.date], int] = {}
    units: dict[str, None] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ("unit", "date", "treated"):
            raise InputError(f"{path}: expected header unit,date,treated, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                treated = int(row["treated"])
                if treated not in (0, 1):
                    raise ValueError(f"treated must be 0 or 1, got {treated}")
                cells[(row["unit"], dt.date.fromisoformat(row["date"].strip()))] = treated
            except (ValueError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
            units.setdefault(row["unit"], None)
    if not cells:
        raise InputError(f"{path}: no rows")
    first = min(d for _, d in cells)
    last = max(d for _, d in cells)
    dates = daily_calendar(first, (last - first).days + 1)
    unit_ids = tuple(units)
    D = np.full((len(unit_ids), len(dates)), -1, dtype=np.int8)
    row_of = {u: i for i, u in enumerate(unit_ids)}
    for (u, d), v in cells.items():
        D[row_of[u], (d - first).days] = v
    if (D < 0).any():
        raise InputError(f"{path}: schedule is not rectangular")

    switches = (np.diff(D, axis=1) != 0).sum(axis=1)
    if (switches <= 1).all() and not (np.diff(D, axis=1) < 0).any():
        onset = [int(np.argmax(r)) if r.any() else len(dates) for r in D]
        pre = min(onset)
        return AssignmentSchedule(DesignKind.FIXED_PODS, len(dates), D, unit_ids, dates, pre_period_days=pre)
    change = np.flatnonzero((np.diff(D, axis=1) != 0).any(axis=0)) + 1
    runs = np.diff(np.concatenate([[0], change, [len(dates)]]))
    block = int(runs[:-1].min()) if len(runs) > 1 else len(dates)
    return AssignmentSchedule(DesignKind.SWITCHBACK, block, D, unit_ids, dates)


def write_pods_csv(pods: PodAssignment, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "cluster", "pod"])
        for u, c, p in zip(pods.unit_ids, pods.cluster, pods.pod):
            w.writerow([u, c, p])
