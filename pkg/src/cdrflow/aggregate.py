"""Daily location assignment, presence counts and transition counts.

These are the record-at-a-time forms of the aggregation; the sharded file
engine in :mod:`cdrflow.engine` computes the same quantities in bulk.

"Located at" on a day is the modal tower of the subscriber's events that day.
Ties go to the tower observed first that day, then to the lexicographically
smallest tower_id.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import groupby
from operator import attrgetter
from typing import Iterable, Iterator

from .matrix import DAY_PAIR, EVENT, MODES, CountMatrix, presence_matrix, transition_matrix
from .pseudonym import DeidRecord
from .records import IntegrityError, day_of


@dataclass(frozen=True, slots=True)
class DailyLocation:
    pseudonym: str
    day: int
    tower_id: str
    event_count: int


def assign_daily_location(pseudonym: str, day: int,
                          events: Iterable[tuple[int, str]]) -> DailyLocation:
    """Modal tower of one subscriber-day from its (timestamp, tower_id) events."""
    stats: dict[str, list[int]] = {}  # tower -> [count, earliest timestamp]
    n = 0
    for ts, tower in events:
        n += 1
        s = stats.get(tower)
        if s is None:
            stats[tower] = [1, ts]
        else:
            s[0] += 1
            if ts < s[1]:
                s[1] = ts
    if not n:
        raise ValueError("assign_daily_location needs at least one event")
    tower = min(stats, key=lambda t: (-stats[t][0], stats[t][1], t))
    return DailyLocation(pseudonym, day, tower, n)


def daily_locations(records: Iterable[DeidRecord], utc_offset_minutes: int = 0) -> Iterator[DailyLocation]:
    """DailyLocations from records grouped by pseudonym (any order within a group).

    Output is ordered by day within each pseudonym.
    """
    seen: set[str] = set()
    for pseudonym, group in groupby(records, key=attrgetter("pseudonym")):
        if pseudonym in seen:
            raise IntegrityError("records are not grouped by pseudonym")
        seen.add(pseudonym)
        by_day: dict[int, list[tuple[int, str]]] = {}
        for r in group:
            by_day.setdefault(day_of(r.timestamp, utc_offset_minutes), []).append((r.timestamp, r.tower_id))
        for day in sorted(by_day):
            yield assign_daily_location(pseudonym, day, by_day[day])


def presence_counts(locations: Iterable[DailyLocation]) -> CountMatrix:
    counts: dict[tuple[int, str], int] = {}
    seen: set[tuple[str, int]] = set()
    for loc in locations:
        key = (loc.pseudonym, loc.day)
        if key in seen:
            raise IntegrityError("duplicate daily location for one subscriber-day")
        seen.add(key)
        cell = (loc.day, loc.tower_id)
        counts[cell] = counts.get(cell, 0) + 1
    return presence_matrix(counts)


def transition_counts(locations: Iterable[DailyLocation], bridge_gap: int = 0) -> CountMatrix:
    """Day-pair transitions between consecutive observed days.

    A pair (d, d') counts when 0 < d' - d <= 1 + bridge_gap. Staying at the
    same tower is a transition too. Input must be grouped by pseudonym and
    strictly increasing in day within each group.
    """
    if bridge_gap < 0:
        raise ValueError("bridge_gap must be >= 0")
    counts: dict[tuple[int, str, str], int] = {}
    finished: set[str] = set()
    prev: DailyLocation | None = None
    for loc in locations:
        if prev is not None and loc.pseudonym == prev.pseudonym:
            if loc.day <= prev.day:
                raise IntegrityError("daily locations not ordered by day within a subscriber")
            if loc.day - prev.day <= 1 + bridge_gap:
                cell = (prev.day, prev.tower_id, loc.tower_id)
                counts[cell] = counts.get(cell, 0) + 1
        else:
            if prev is not None:
                finished.add(prev.pseudonym)
            if loc.pseudonym in finished:
                raise IntegrityError("daily locations are not grouped by pseudonym")
        prev = loc
    return transition_matrix(counts, DAY_PAIR)


def event_transition_counts(records: Iterable[DeidRecord], utc_offset_minutes: int = 0) -> CountMatrix:
    """Event-level transitions: consecutive same-day events at distinct towers.

    Records must be grouped by pseudonym. Within a group events are ordered
    by (timestamp, tower_id), so simultaneous events have a fixed order.
    """
    counts: dict[tuple[int, str, str], int] = {}
    seen: set[str] = set()
    for pseudonym, group in groupby(records, key=attrgetter("pseudonym")):
        if pseudonym in seen:
            raise IntegrityError("records are not grouped by pseudonym")
        seen.add(pseudonym)
        events = sorted((r.timestamp, r.tower_id) for r in group)
        for (t0, a), (t1, b) in zip(events, events[1:]):
            if a == b:
                continue
            d0 = day_of(t0, utc_offset_minutes)
            if d0 == day_of(t1, utc_offset_minutes):
                cell = (d0, a, b)
                counts[cell] = counts.get(cell, 0) + 1
    return transition_matrix(counts, EVENT)


def aggregate_records(records: Iterable[DeidRecord], mode: str = DAY_PAIR, bridge_gap: int = 0,
                      utc_offset_minutes: int = 0) -> tuple[CountMatrix, CountMatrix]:
    """In-memory aggregation of an arbitrary-order record collection."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    ordered = sorted(records, key=attrgetter("pseudonym", "timestamp", "tower_id"))
    locations = list(daily_locations(ordered, utc_offset_minutes))
    presence = presence_counts(locations)
    if mode == DAY_PAIR:
        transitions = transition_counts(locations, bridge_gap)
    else:
        transitions = event_transition_counts(ordered, utc_offset_minutes)
    return presence, transitions
