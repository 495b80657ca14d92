"""Domain types shared by the generator, codec and engines.

Timestamps are naive ``datetime`` values interpreted as UTC, with whole-second
resolution. Site and entity ids are plain non-negative ints.
"""
from __future__ import annotations

import dataclasses
import datetime as dt
from dataclasses import dataclass, field
from typing import NamedTuple

from malstone import isoweek

EVENT_SEQ_LIMIT = 10**18
SITE_ID_LIMIT = 10**20
ENTITY_ID_LIMIT = 10**25


@dataclass(frozen=True)
class EventRecord:
    event_node: str  # 12 lowercase hex chars
    event_seq: int
    timestamp: dt.datetime
    site_id: int
    entity_id: int
    mark_flag: bool

    @property
    def event_id(self) -> str:
        return f"{self.event_node}{self.event_seq:018d}"


@dataclass(frozen=True, order=True)
class WeekBucket:
    """ISO-8601 (week-year, week). Dataclass ordering is chronological."""

    iso_year: int
    iso_week: int

    def __post_init__(self):
        if not 1 <= self.iso_week <= iso_weeks_in_year(self.iso_year):
            raise ValueError(f"no ISO week {self.iso_week} in {self.iso_year}")

    def __str__(self):
        return f"{self.iso_year}-W{self.iso_week:02d}"


@dataclass(frozen=True)
class Window:
    start: dt.datetime
    end: dt.datetime

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"window start {self.start} is after end {self.end}")

    def __contains__(self, ts: dt.datetime) -> bool:
        return self.start <= ts <= self.end


class SeriesEntry(NamedTuple):
    bucket: WeekBucket
    cum_events: int
    cum_marked: int
    rho: float


@dataclass(frozen=True)
class SpmSeries:
    site_id: int
    entries: tuple[SeriesEntry, ...]


@dataclass(frozen=True)
class SpmScore:
    site_id: int
    events: int
    marked: int
    rho: float


@dataclass
class GenConfig:
    nodes: int
    records_per_node: int
    total_sites: int
    marked_sites: int
    entities: int
    period_start: dt.date = dt.date(2009, 1, 1)
    period_days: int = 365
    p_mark: float = 0.70
    delay_days: int = 7
    alpha: float = 2.0
    events_min: int = 50
    events_max: int = 10**7
    background_mark_rate: float = 0.0
    master_seed: int = 0

    @property
    def total_records(self) -> int:
        return self.nodes * self.records_per_node

    @property
    def period_start_epoch(self) -> int:
        return isoweek.date_to_days(self.period_start) * isoweek.SECONDS_PER_DAY

    @property
    def period_end_epoch(self) -> int:
        """Exclusive end of the generation period, in epoch seconds."""
        return self.period_start_epoch + self.period_days * isoweek.SECONDS_PER_DAY

    @property
    def delay_seconds(self) -> int:
        return self.delay_days * isoweek.SECONDS_PER_DAY

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["period_start"] = self.period_start.isoformat()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if isinstance(d.get("period_start"), str):
            d["period_start"] = dt.date.fromisoformat(d["period_start"])
        return cls(**d)


def iso_weeks_in_year(year: int) -> int:
    # Dec 28 always falls in the last ISO week of its year.
    days = isoweek.days_from_civil(year, 12, 28)
    return isoweek.iso_year_week(days)[1]


def iso_week_bucket(timestamp: dt.datetime) -> WeekBucket:
    days = isoweek.days_from_civil(timestamp.year, timestamp.month, timestamp.day)
    year, week = isoweek.iso_year_week(days)
    return WeekBucket(int(year), int(week))


def bucket_precedes(a: WeekBucket, b: WeekBucket) -> bool:
    return (a.iso_year, a.iso_week) < (b.iso_year, b.iso_week)


def validate_config(cfg: GenConfig) -> list[str]:
    """Return every invariant violation of ``cfg``; an empty list means ok."""
    problems = []
    for name in ("nodes", "records_per_node", "total_sites", "entities", "events_min"):
        if getattr(cfg, name) < 1:
            problems.append(f"{name} must be at least 1")
    if cfg.marked_sites < 0:
        problems.append("marked_sites must be non-negative")
    if cfg.marked_sites > cfg.total_sites:
        problems.append("marked_sites exceeds total_sites")
    if cfg.period_days < 1:
        problems.append("period_days must be at least 1")
    if cfg.events_min > cfg.events_max:
        problems.append("events_min exceeds events_max")
    if not 0.0 <= cfg.p_mark <= 1.0:
        problems.append("p_mark outside [0,1]")
    if not 0.0 <= cfg.background_mark_rate <= 1.0:
        problems.append("background_mark_rate outside [0,1]")
    if cfg.delay_days < 0:
        problems.append("delay_days must be non-negative")
    if not cfg.alpha > 1.0:
        problems.append("alpha must exceed 1")
    if not 0 <= cfg.master_seed < 2**64:
        problems.append("master_seed must be a 64-bit unsigned integer")
    if cfg.total_records >= EVENT_SEQ_LIMIT:
        problems.append("records_per_node overflows the 18-digit event sequence")
    if cfg.total_sites >= SITE_ID_LIMIT:
        problems.append("total_sites overflows the 20-digit site id")
    if cfg.entities >= ENTITY_ID_LIMIT:
        problems.append("entities overflows the 25-digit entity id")
    return problems


def series_violations(series: SpmSeries) -> list[str]:
    """Check the ordering and ratio invariants of one site's series."""
    out = []
    prev = None
    for i, (bucket, events, marked, rho) in enumerate(series.entries):
        where = f"site {series.site_id} entry {i}"
        if prev is not None:
            if not bucket_precedes(prev.bucket, bucket):
                out.append(f"{where}: bucket {bucket} not after {prev.bucket}")
            if events <= prev.cum_events:
                out.append(f"{where}: cum_events not strictly increasing")
            if marked < prev.cum_marked:
                out.append(f"{where}: cum_marked decreased")
        if not 0 <= marked <= events:
            out.append(f"{where}: cum_marked {marked} outside [0, {events}]")
        if events < 1 or rho != marked / events:
            out.append(f"{where}: rho {rho} != {marked}/{events}")
        prev = series.entries[i]
    if not series.entries:
        out.append(f"site {series.site_id}: empty series")
    return out
