"""Raw CDR records, tower registry and day indexing shared by every stage."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

SECONDS_PER_DAY = 86400

# Reject reason codes written to quarantine files.
FIELD_COUNT = "FIELD_COUNT"
EMPTY_FIELD = "EMPTY_FIELD"
BAD_TIMESTAMP = "BAD_TIMESTAMP"
UNKNOWN_TOWER = "UNKNOWN_TOWER"

REGISTRY_HEADER = ("tower_id", "lat", "lon", "region_id")


class CdrError(Exception):
    """Base class for pipeline errors."""


class CdrParseError(CdrError):
    def __init__(self, lineno: int | None, reason: str, message: str):
        self.lineno = lineno
        self.reason = reason
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(f"{where}{reason}: {message}")


class CdrValidationError(CdrError):
    def __init__(self, reason: str, message: str, lineno: int | None = None):
        self.lineno = lineno
        self.reason = reason
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(f"{where}{reason}: {message}")


class IntegrityError(CdrError):
    """Aggregation input violates an ordering or uniqueness precondition."""


@dataclass(frozen=True, slots=True)
class RawCdrRecord:
    subscriber_id: str
    timestamp: int
    tower_id: str

    def __post_init__(self):
        if not self.subscriber_id:
            raise ValueError("subscriber_id must be non-empty")
        if not self.tower_id:
            raise ValueError("tower_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")

    def to_line(self) -> str:
        return f"{self.subscriber_id},{self.timestamp},{self.tower_id}"


@dataclass(frozen=True, slots=True)
class Tower:
    lat: float
    lon: float
    region_id: str


class TowerRegistry(Mapping[str, Tower]):
    """Immutable mapping tower_id -> Tower (lat, lon, region_id)."""

    def __init__(self, entries: Mapping[str, Tower] | Iterable[tuple[str, Tower]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        towers: dict[str, Tower] = {}
        for tower_id, tower in items:
            if not tower_id:
                raise ValueError("empty tower_id in registry")
            if tower_id in towers:
                raise ValueError(f"duplicate tower_id {tower_id!r} in registry")
            if not (-90.0 <= tower.lat <= 90.0) or not (-180.0 <= tower.lon <= 180.0):
                raise ValueError(f"tower {tower_id!r} has out-of-range coordinates")
            if not tower.region_id:
                raise ValueError(f"tower {tower_id!r} has an empty region_id")
            towers[tower_id] = tower
        self._towers = towers

    def __getitem__(self, tower_id: str) -> Tower:
        return self._towers[tower_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self._towers)

    def __len__(self) -> int:
        return len(self._towers)

    def region_of(self, tower_id: str) -> str:
        return self._towers[tower_id].region_id

    def regions(self) -> list[str]:
        return sorted({t.region_id for t in self._towers.values()})


def load_registry(path: str | Path) -> TowerRegistry:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != REGISTRY_HEADER:
            raise CdrValidationError(
                "BAD_HEADER", f"registry {path} must start with header {','.join(REGISTRY_HEADER)}"
            )
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise CdrParseError(lineno, FIELD_COUNT, f"expected 4 registry fields, got {len(row)}")
            tower_id, lat, lon, region = (c.strip() for c in row)
            try:
                tower = Tower(float(lat), float(lon), region)
            except ValueError:
                raise CdrParseError(lineno, "BAD_COORDINATE", "latitude/longitude not numeric") from None
            if not (math.isfinite(tower.lat) and math.isfinite(tower.lon)):
                raise CdrParseError(lineno, "BAD_COORDINATE", "latitude/longitude not finite")
            entries.append((tower_id, tower))
    try:
        return TowerRegistry(entries)
    except ValueError as exc:
        raise CdrValidationError("BAD_REGISTRY", str(exc)) from None


def write_registry(path: str | Path, registry: TowerRegistry) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(",".join(REGISTRY_HEADER) + "\n")
        for tower_id in sorted(registry):
            t = registry[tower_id]
            f.write(f"{tower_id},{t.lat:.6f},{t.lon:.6f},{t.region_id}\n")


def _is_uint(text: str) -> bool:
    return text.isascii() and text.isdigit()


def parse_cdr_line(line: str, lineno: int | None = None) -> RawCdrRecord:
    """Parse one ``subscriber_id,timestamp,tower_id`` row.

    Fields are whitespace-trimmed. The timestamp must be a non-negative
    integer written in ASCII digits.
    """
    parts = line.split(",")
    if len(parts) != 3:
        raise CdrParseError(lineno, FIELD_COUNT, f"expected 3 fields, got {len(parts)}")
    sid, ts, tower = (p.strip() for p in parts)
    if not sid or not ts or not tower:
        raise CdrParseError(lineno, EMPTY_FIELD, "empty field")
    if not _is_uint(ts):
        raise CdrParseError(lineno, BAD_TIMESTAMP, "timestamp is not a non-negative integer")
    return RawCdrRecord(sid, int(ts), tower)


def validate_record(record: RawCdrRecord, registry: TowerRegistry, lineno: int | None = None) -> RawCdrRecord:
    if record.tower_id not in registry:
        raise CdrValidationError(UNKNOWN_TOWER, "tower_id not present in registry", lineno)
    return record


def day_of(timestamp: int, offset_minutes: int = 0) -> int:
    return (timestamp + offset_minutes * 60) // SECONDS_PER_DAY


def iter_cdr_file(path: str | Path) -> Iterator[tuple[int, str]]:
    """Yield (line number, line) for each line of a raw CDR file."""
    with open(path, encoding="utf-8", newline="\n") as f:
        yield from enumerate(f, start=1)


class RejectWriter:
    """Quarantine sink: ``line,reason,row`` CSV next to the raw data."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.count = 0
        self._f = open(self.path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(["line", "reason", "row"])

    def reject(self, lineno: int, reason: str, row: str) -> None:
        self._w.writerow([lineno, reason, row.rstrip("\r\n")])
        self.count += 1

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
