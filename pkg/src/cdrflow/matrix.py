"""Sparse count matrices and their CSV forms.

One type covers the four shareable aggregates:

=============  ======  =====================================  ===============
kind           level   key                                    file header
=============  ======  =====================================  ===============
presence       tower   (day, tower_id)                        day,tower_id,count
transitions    tower   (day, from_tower, to_tower)            day,from_tower,to_tower,count
presence       region  (window_start, region_id)              window_start_day,window_days,region_id,count
transitions    region  (window_start, from_region, to_region) window_start_day,window_days,from_region,to_region,count
=============  ======  =====================================  ===============

Zero cells are never stored.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

PRESENCE = "presence"
TRANSITIONS = "transitions"
TOWER = "tower"
REGION = "region"
LEVELS = (TOWER, REGION)

DAY_PAIR = "day-pair"
EVENT = "event"
MODES = (DAY_PAIR, EVENT)


@dataclass(frozen=True)
class CountMatrix:
    kind: str
    level: str = TOWER
    counts: dict[tuple, int] = field(default_factory=dict)
    window_days: int = 1
    mode: str | None = None
    partial_windows: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in (PRESENCE, TRANSITIONS):
            raise ValueError(f"unknown matrix kind {self.kind!r}")
        if self.level not in LEVELS:
            raise ValueError(f"unknown spatial level {self.level!r}")
        if self.window_days < 1:
            raise ValueError("window_days must be >= 1")
        if any(v < 1 for v in self.counts.values()):
            raise ValueError("count matrices store only positive cells")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def days(self) -> list[int]:
        return sorted({k[0] for k in self.counts})

    def with_counts(self, counts: dict[tuple, int], **changes) -> "CountMatrix":
        return replace(self, counts=counts, **changes)

    def header(self) -> list[str]:
        return header_for(self.kind, self.level, self.window_days)

    def rows(self) -> list[list]:
        out = []
        windowed = self.header()[0] == "window_start_day"
        for key in sorted(self.counts):
            if windowed:
                out.append([key[0], self.window_days, *key[1:], self.counts[key]])
            else:
                out.append([*key, self.counts[key]])
        return out


def presence_matrix(counts: dict[tuple[int, str], int] | None = None) -> CountMatrix:
    return CountMatrix(PRESENCE, TOWER, dict(counts or {}))


def transition_matrix(counts: dict[tuple[int, str, str], int] | None = None,
                      mode: str = DAY_PAIR) -> CountMatrix:
    return CountMatrix(TRANSITIONS, TOWER, dict(counts or {}), mode=mode)


def header_for(kind: str, level: str, window_days: int) -> list[str]:
    loc = "tower" if level == TOWER else "region"
    cols = [f"{loc}_id"] if kind == PRESENCE else [f"from_{loc}", f"to_{loc}"]
    if level == TOWER and window_days == 1:
        return ["day", *cols, "count"]
    return ["window_start_day", "window_days", *cols, "count"]


def describe_header(header: Iterable[str]) -> tuple[str, str, bool] | None:
    """Return (kind, level, windowed) for a known matrix header, else None."""
    header = list(header)
    for kind in (PRESENCE, TRANSITIONS):
        for level in LEVELS:
            for wd in (1, 7):
                if header == header_for(kind, level, wd):
                    return kind, level, header[0] == "window_start_day"
    return None


def merge(matrices: Iterable[CountMatrix]) -> CountMatrix:
    """Cell-wise sum of matrices of the same kind, level and window."""
    matrices = list(matrices)
    if not matrices:
        raise ValueError("nothing to merge")
    first = matrices[0]
    acc: dict[tuple, int] = {}
    for m in matrices:
        if (m.kind, m.level, m.window_days) != (first.kind, first.level, first.window_days):
            raise ValueError("cannot merge matrices of different shape")
        for k, v in m.counts.items():
            acc[k] = acc.get(k, 0) + v
    return first.with_counts(acc)


def write_matrix(path: str | Path, m: CountMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(m.header())
        w.writerows(m.rows())


def read_matrix(path: str | Path, mode: str | None = None) -> CountMatrix:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        desc = describe_header(header or [])
        if desc is None:
            raise ValueError(f"{path}: unrecognised matrix header {header!r}")
        kind, level, windowed = desc
        width = len(header)
        counts: dict[tuple, int] = {}
        window_days = 1
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} fields")
            if windowed:
                start, wd, *locs, n = row
                window_days = int(wd)
                key = (int(start), *locs)
            else:
                day, *locs, n = row
                key = (int(day), *locs)
            if key in counts:
                raise ValueError(f"{path}:{lineno}: duplicate cell")
            counts[key] = int(n)
    return CountMatrix(kind, level, counts, window_days=window_days,
                       mode=mode if kind == TRANSITIONS else None)
