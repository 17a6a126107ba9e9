"""Unit-by-day outcome panels and their ingestion from directional records."""

from __future__ import annotations

import csv
import datetime as dt
import enum
import math
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalendarGapUnresolvable, EmptyInput, InputError, NonFiniteMetric

RECORD_HEADER = ("route", "direction", "date", "value")
PANEL_HEADER = ("unit", "date", "outcome")


class Direction(enum.Enum):
    AtoB = "AB"
    BtoA = "BA"


class Aggregation(enum.Enum):
    SUM = "sum"
    MEAN = "mean"


@dataclass(frozen=True)
class RawRecord:
    route: str
    direction: Direction
    date: dt.date
    value: float


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    message: str
    unit: str | None = None
    date: dt.date | None = None


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Dense outcome matrix with one row per unit and one column per day.

    The outcome array is made read-only on construction.  Invariants are not
    enforced here; use :func:`validate_panel` to list violations.
    """

    unit_ids: tuple[str, ...]
    dates: tuple[dt.date, ...]
    outcomes: np.ndarray
    day_of_week: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "dates", tuple(self.dates))
        y = np.array(self.outcomes, dtype=float)
        y.flags.writeable = False
        object.__setattr__(self, "outcomes", y)
        dow = np.array([d.weekday() for d in self.dates], dtype=int)
        dow.flags.writeable = False
        object.__setattr__(self, "day_of_week", dow)

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def shape(self) -> tuple[int, int]:
        return self.outcomes.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PanelDataset):
            return NotImplemented
        return (
            self.unit_ids == other.unit_ids
            and self.dates == other.dates
            and self.outcomes.shape == other.outcomes.shape
            and bool(np.array_equal(self.outcomes, other.outcomes, equal_nan=True))
        )

    def __hash__(self) -> int:
        return hash((self.unit_ids, self.dates, self.outcomes.tobytes()))

    def window(self, start: int, length: int) -> PanelDataset:
        """Days ``start .. start+length-1`` (offsets from the first date)."""
        if start < 0 or length <= 0 or start + length > self.n_days:
            raise InputError(f"window [{start}, {start + length}) outside panel of {self.n_days} days")
        return PanelDataset(
            self.unit_ids, self.dates[start : start + length], self.outcomes[:, start : start + length]
        )

    def with_outcomes(self, outcomes: np.ndarray) -> PanelDataset:
        return PanelDataset(self.unit_ids, self.dates, outcomes)


def canonical_route(route: str) -> str:
    """Non-directional key: ``"SCL-LIM"`` and ``"LIM-SCL"`` both map to ``"LIM-SCL"``."""
    parts = route.strip().split("-")
    if len(parts) == 2:
        return "-".join(sorted(p.strip() for p in parts))
    return route.strip()


def daily_calendar(start: dt.date, n_days: int) -> tuple[dt.date, ...]:
    return tuple(start + dt.timedelta(days=k) for k in range(n_days))


def build_panel(
    records: Iterable[RawRecord], metric_aggregation: Aggregation | str = Aggregation.SUM
) -> PanelDataset:
    """Collapse directional route-day records into a non-directional panel.

    Both directions of a route on the same date are combined with
    ``metric_aggregation``.  Missing (route, date) cells are filled with zero
    for sums; for means any missing cell raises
    :class:`CalendarGapUnresolvable`.
    """
    how = Aggregation(metric_aggregation)
    records = list(records)
    if not records:
        raise EmptyInput("no records")

    totals: dict[tuple[str, dt.date], float] = defaultdict(float)
    counts: dict[tuple[str, dt.date], int] = defaultdict(int)
    for rec in records:
        value = float(rec.value)
        if not math.isfinite(value):
            raise NonFiniteMetric(f"non-finite value for route {rec.route!r} on {rec.date}")
        key = (canonical_route(rec.route), rec.date)
        totals[key] += value
        counts[key] += 1

    units = sorted({k[0] for k in totals})
    first = min(k[1] for k in totals)
    last = max(k[1] for k in totals)
    dates = daily_calendar(first, (last - first).days + 1)
    row = {u: i for i, u in enumerate(units)}

    y = np.zeros((len(units), len(dates)))
    seen = np.zeros(y.shape, dtype=bool)
    # Sort keys so float summation order never depends on input order.
    for (unit, day), total in sorted(totals.items()):
        i, t = row[unit], (day - first).days
        y[i, t] = total if how is Aggregation.SUM else total / counts[(unit, day)]
        seen[i, t] = True

    if how is Aggregation.MEAN and not seen.all():
        i, t = np.argwhere(~seen)[0]
        raise CalendarGapUnresolvable(
            f"{int((~seen).sum())} missing cells for a mean metric, first at unit {units[i]!r} on {dates[t]}"
        )
    return PanelDataset(tuple(units), dates, y)


def validate_panel(panel: PanelDataset) -> list[Diagnostic]:
    """Return one diagnostic per violated invariant (empty when the panel is valid)."""
    out: list[Diagnostic] = []
    y = np.asarray(panel.outcomes)
    if y.ndim != 2 or y.shape != (len(panel.unit_ids), len(panel.dates)):
        out.append(
            Diagnostic(
                "DimensionMismatch",
                f"outcomes shape {y.shape} != ({len(panel.unit_ids)}, {len(panel.dates)})",
            )
        )
    seen: set[str] = set()
    for u in panel.unit_ids:
        if u in seen:
            out.append(Diagnostic("DuplicateUnit", f"unit {u!r} appears more than once", unit=u))
        seen.add(u)
    for prev, cur in zip(panel.dates, panel.dates[1:]):
        if cur <= prev:
            out.append(Diagnostic("NonIncreasingDate", f"{cur} follows {prev}", date=cur))
        else:
            missing = prev + dt.timedelta(days=1)
            while missing < cur:
                out.append(Diagnostic("CalendarGap", f"missing date {missing}", date=missing))
                missing += dt.timedelta(days=1)
    if y.ndim == 2 and y.shape == (len(panel.unit_ids), len(panel.dates)):
        for i, t in np.argwhere(~np.isfinite(y)):
            out.append(
                Diagnostic(
                    "NonFinite",
                    f"non-finite outcome {y[i, t]} at ({panel.unit_ids[i]}, {panel.dates[t]})",
                    unit=panel.unit_ids[i],
                    date=panel.dates[t],
                )
            )
    return out


def read_records_csv(path: str | Path) -> list[RawRecord]:
    """Read ``route,direction,date,value`` rows."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_HEADER:
            raise InputError(f"{path}: expected header {','.join(RECORD_HEADER)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(
                    RawRecord(
                        route=row["route"],
                        direction=Direction(row["direction"].strip()),
                        date=dt.date.fromisoformat(row["date"].strip()),
                        value=float(row["value"]),
                    )
                )
            except (ValueError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_records_csv(records: Sequence[RawRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_HEADER)
        for r in records:
            w.writerow([r.route, r.direction.value, r.date.isoformat(), repr(float(r.value))])


def write_panel_csv(panel: PanelDataset, path: str | Path) -> None:
    """Long format ``unit,date,outcome``; floats written with ``repr`` so they round-trip."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PANEL_HEADER)
        for i, unit in enumerate(panel.unit_ids):
            for t, day in enumerate(panel.dates):
                w.writerow([unit, day.isoformat(), repr(float(panel.outcomes[i, t]))])


def read_panel_csv(path: str | Path) -> PanelDataset:
    """Inverse of :func:`write_panel_csv`.  Unit order follows first appearance."""
    cells: dict[tuple[str, dt.date], float] = {}
    units: dict[str, None] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PANEL_HEADER:
            raise InputError(f"{path}: expected header {','.join(PANEL_HEADER)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                key = (row["unit"], dt.date.fromisoformat(row["date"].strip()))
                cells[key] = float(row["outcome"])
            except (ValueError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
            units.setdefault(row["unit"], None)
    if not cells:
        raise EmptyInput(f"{path}: no rows")
    first = min(d for _, d in cells)
    last = max(d for _, d in cells)
    dates = daily_calendar(first, (last - first).days + 1)
    unit_ids = tuple(units)
    y = np.full((len(unit_ids), len(dates)), np.nan)
    row_of = {u: i for i, u in enumerate(unit_ids)}
    for (u, d), v in cells.items():
        y[row_of[u], (d - first).days] = v
    if np.isnan(y).any():
        raise CalendarGapUnresolvable(f"{path}: panel has {int(np.isnan(y).sum())} missing cells")
    return PanelDataset(unit_ids, dates, y)
