"""Brute-force reference aggregates.

Deliberately naive and memory-unbounded: everything is recomputed from the
full record list with plain loops. Nothing here calls into the aggregation,
engine or rollup modules; only the result container type is shared, so a
bug in the production path cannot hide in both places at once.
"""
from __future__ import annotations

from typing import Sequence

from .matrix import DAY_PAIR, PRESENCE, REGION, TOWER, TRANSITIONS, CountMatrix
from .pseudonym import DeidRecord
from .records import TowerRegistry


def _day(ts: int, offset_minutes: int) -> int:
    q, _ = divmod(ts + 60 * offset_minutes, 24 * 3600)
    return q


def _by_pseudonym(records: Sequence[DeidRecord]) -> dict[str, list[DeidRecord]]:
    groups: dict[str, list[DeidRecord]] = {}
    for r in records:
        groups.setdefault(r.pseudonym, []).append(r)
    return groups


def _located(records: Sequence[DeidRecord], offset_minutes: int) -> dict[str, dict[int, str]]:
    """pseudonym -> {day: modal tower}."""
    out: dict[str, dict[int, str]] = {}
    for p, events in _by_pseudonym(records).items():
        days = sorted({_day(e.timestamp, offset_minutes) for e in events})
        out[p] = {}
        for d in days:
            todays = [e for e in events if _day(e.timestamp, offset_minutes) == d]
            best = None
            best_n = best_first = None
            for t in sorted({e.tower_id for e in todays}):
                n = 0
                first = None
                for e in todays:
                    if e.tower_id == t:
                        n += 1
                        if first is None or e.timestamp < first:
                            first = e.timestamp
                # towers are visited in increasing id order, so an equal
                # (count, first) never displaces the current choice
                if best is None or n > best_n or (n == best_n and first < best_first):
                    best, best_n, best_first = t, n, first
            out[p][d] = best
    return out


def oracle_presence(records: Sequence[DeidRecord], utc_offset_minutes: int = 0) -> CountMatrix:
    counts: dict[tuple, int] = {}
    for days in _located(records, utc_offset_minutes).values():
        for d, t in days.items():
            counts[(d, t)] = counts.get((d, t), 0) + 1
    return CountMatrix(PRESENCE, TOWER, counts)


def _pairs(records: Sequence[DeidRecord], mode: str, bridge_gap: int,
           offset_minutes: int) -> list[tuple[int, str, str]]:
    """Every (day, from_tower, to_tower) transition instance."""
    found = []
    if mode == DAY_PAIR:
        for days in _located(records, offset_minutes).values():
            ordered = sorted(days)
            for i in range(len(ordered) - 1):
                d0, d1 = ordered[i], ordered[i + 1]
                if 0 < d1 - d0 <= 1 + bridge_gap:
                    found.append((d0, days[d0], days[d1]))
    else:
        for events in _by_pseudonym(records).values():
            seq = sorted(events, key=lambda e: (e.timestamp, e.tower_id))
            for a, b in zip(seq, seq[1:]):
                da = _day(a.timestamp, offset_minutes)
                if a.tower_id != b.tower_id and da == _day(b.timestamp, offset_minutes):
                    found.append((da, a.tower_id, b.tower_id))
    return found


def oracle_transitions(records: Sequence[DeidRecord], mode: str = DAY_PAIR, bridge_gap: int = 0,
                       utc_offset_minutes: int = 0) -> CountMatrix:
    counts: dict[tuple, int] = {}
    for cell in _pairs(records, mode, bridge_gap, utc_offset_minutes):
        counts[cell] = counts.get(cell, 0) + 1
    return CountMatrix(TRANSITIONS, TOWER, counts, mode=mode)


def _windowing(records: Sequence[DeidRecord], window_days: int, offset_minutes: int,
               origin_day: int | None):
    days = [_day(r.timestamp, offset_minutes) for r in records]
    if not days:
        return (lambda d: d), ()
    first, last = min(days), max(days)
    origin = first if origin_day is None else origin_day

    def start(d: int) -> int:
        return origin + ((d - origin) // window_days) * window_days

    starts = sorted({start(d) for d in range(first, last + 1)})
    partial = tuple(s for s in starts if s + window_days - 1 > last)
    return start, partial


def oracle_region_rollup(records: Sequence[DeidRecord], registry: TowerRegistry, window_days: int,
                         mode: str = DAY_PAIR, bridge_gap: int = 0, utc_offset_minutes: int = 0,
                         origin_day: int | None = None) -> CountMatrix:
    """Region-to-region windowed flows straight from the records."""
    start, partial = _windowing(records, window_days, utc_offset_minutes, origin_day)
    counts: dict[tuple, int] = {}
    for d, a, b in _pairs(records, mode, bridge_gap, utc_offset_minutes):
        cell = (start(d), registry[a].region_id, registry[b].region_id)
        counts[cell] = counts.get(cell, 0) + 1
    present = {k[0] for k in counts}
    return CountMatrix(TRANSITIONS, REGION, counts, window_days=window_days, mode=mode,
                       partial_windows=tuple(s for s in partial if s in present))


def oracle_region_presence(records: Sequence[DeidRecord], registry: TowerRegistry, window_days: int,
                           utc_offset_minutes: int = 0, origin_day: int | None = None) -> CountMatrix:
    start, partial = _windowing(records, window_days, utc_offset_minutes, origin_day)
    counts: dict[tuple, int] = {}
    for days in _located(records, utc_offset_minutes).values():
        for d, t in days.items():
            cell = (start(d), registry[t].region_id)
            counts[cell] = counts.get(cell, 0) + 1
    present = {k[0] for k in counts}
    return CountMatrix(PRESENCE, REGION, counts, window_days=window_days,
                       partial_windows=tuple(s for s in partial if s in present))
