"""Spatial (tower -> region) and temporal (day -> window) re-aggregation."""
from __future__ import annotations

from .matrix import PRESENCE, REGION, TOWER, CountMatrix
from .records import CdrValidationError, TowerRegistry


class UnknownTowerError(CdrValidationError):
    def __init__(self, tower_id: str):
        self.tower_id = tower_id
        super().__init__("UNKNOWN_TOWER", f"tower {tower_id!r} is missing from the registry")


def spatial_rollup(m: CountMatrix, registry: TowerRegistry) -> CountMatrix:
    """Sum tower cells into the regions their towers belong to.

    Raises UnknownTowerError (and produces nothing) if any tower is unmapped.
    """
    if m.level != TOWER:
        raise ValueError("matrix is already at region level")
    locs = {t for key in m.counts for t in key[1:]}
    for t in sorted(locs):
        if t not in registry:
            raise UnknownTowerError(t)
    region = {t: registry.region_of(t) for t in locs}
    out: dict[tuple, int] = {}
    for (start, *towers), n in m.counts.items():
        key = (start, *(region[t] for t in towers))
        out[key] = out.get(key, 0) + n
    return m.with_counts(out, level=REGION)


def temporal_rollup(m: CountMatrix, window_days: int, origin_day: int | None = None,
                    last_day: int | None = None) -> CountMatrix:
    """Sum daily cells into windows of ``window_days`` tiling from ``origin_day``.

    ``origin_day`` defaults to the first day present. A window reaching past
    ``last_day`` (default: last day present) is kept and listed in
    ``partial_windows``.
    """
    if window_days < 1:
        raise ValueError("window_days must be >= 1")
    if m.window_days != 1:
        raise ValueError("temporal_rollup expects a daily matrix")
    days = m.days()
    if not m.counts:
        return m.with_counts({}, window_days=window_days, partial_windows=())
    if origin_day is None:
        origin_day = days[0]
    if last_day is None:
        last_day = days[-1]
    out: dict[tuple, int] = {}
    for (day, *locs), n in m.counts.items():
        start = origin_day + ((day - origin_day) // window_days) * window_days
        key = (start, *locs)
        out[key] = out.get(key, 0) + n
    partial = tuple(sorted({k[0] for k in out if k[0] + window_days - 1 > last_day}))
    return m.with_counts(out, window_days=window_days, partial_windows=partial)


def rollup(m: CountMatrix, registry: TowerRegistry, window_days: int, origin_day: int | None = None,
           last_day: int | None = None) -> CountMatrix:
    """Region-level windowed matrix: spatial rollup followed by temporal rollup."""
    return temporal_rollup(spatial_rollup(m, registry), window_days, origin_day, last_day)


def presence_span(presence: CountMatrix) -> tuple[int, int] | None:
    """First and last active day of a daily presence matrix."""
    if presence.kind != PRESENCE or presence.window_days != 1:
        raise ValueError("expected a daily presence matrix")
    days = presence.days()
    return (days[0], days[-1]) if days else None
