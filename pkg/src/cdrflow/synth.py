"""Deterministic synthetic CDR generator with a ground-truth sidecar.

Randomness comes from numpy's Philox-4x64 counter-based generator, keyed by
``(seed, stream)``: stream 0 draws the subscriber mobility profiles, stream 1
the tower coordinates, and stream ``2 + day`` everything about that day. Each
day can therefore be regenerated on its own, and output depends only on the
config.

Mobility model: every subscriber has a home tower and 1-3 distinct alternate
towers. On a travel day a strict majority of the day's events sit at one
alternate tower and the rest at home; otherwise all events are at home. The
modal tower of every subscriber-day is thus fixed by construction.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .records import SECONDS_PER_DAY, RawCdrRecord, Tower, TowerRegistry, write_registry

TRUTH_HEADER = "subscriber_id,day,tower_id,events"
_U64 = (1 << 64) - 1
_SETUP, _REGISTRY, _DAY0 = 0, 1, 2
# bounding box for fabricated tower coordinates
_LAT = (24.0, 37.0)
_LON = (61.0, 77.0)


@dataclass(frozen=True)
class GeneratorConfig:
    n_subscribers: int
    n_towers: int
    n_days: int
    mean_events_per_day: float = 4.0
    p_travel: float = 0.2
    p_silent: float = 0.1
    shuffle_window: int = 0
    seed: int = 0
    n_regions: int = 3

    def __post_init__(self):
        for name in ("n_subscribers", "n_towers", "n_days", "n_regions"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.shuffle_window < 0:
            raise ValueError("shuffle_window must be >= 0")
        if not self.mean_events_per_day > 0:
            raise ValueError("mean_events_per_day must be positive")
        for name in ("p_travel", "p_silent"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


def load_generator_config(path: str | Path, section: str = "generator") -> GeneratorConfig:
    """Read a flat ``key = value`` file (an optional [generator] header is allowed)."""
    values = read_flat_config(path, section)
    return config_from_mapping(values)


def read_flat_config(path: str | Path, section: str) -> dict[str, str]:
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None)
    if not text.lstrip().startswith("["):
        text = f"[{section}]\n{text}"
    parser.read_string(text)
    if parser.has_section(section):
        return dict(parser.items(section))
    return dict(parser.defaults())


def config_from_mapping(values: dict[str, str]) -> GeneratorConfig:
    kwargs = {}
    for f in fields(GeneratorConfig):
        if f.name in values:
            cast = float if f.name in ("mean_events_per_day", "p_travel", "p_silent") else int
            kwargs[f.name] = cast(values[f.name])
    return GeneratorConfig(**kwargs)


def subscriber_id(index: int) -> str:
    return f"923{index:09d}"


def tower_ids(n_towers: int) -> list[str]:
    width = max(3, len(str(n_towers - 1)))
    return [f"T{i:0{width}d}" for i in range(n_towers)]


def _rng(config: GeneratorConfig, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(config.seed & _U64) | (stream << 64)))


@dataclass(frozen=True)
class Profiles:
    home: np.ndarray
    alternates: np.ndarray  # (n_subscribers, 3), -1 for unused slots
    n_alt: np.ndarray


def profiles(config: GeneratorConfig) -> Profiles:
    """Home tower and 1-3 distinct alternates (all different from home) per subscriber."""
    rng = _rng(config, _SETUP)
    s, t = config.n_subscribers, config.n_towers
    home = rng.integers(0, t, s)
    n_alt = np.minimum(rng.integers(1, 4, s), t - 1)
    # sequential sampling without replacement from the t-1 non-home towers
    m = max(t - 1, 1)
    j = np.stack([rng.integers(0, m, s), rng.integers(0, max(m - 1, 1), s), rng.integers(0, max(m - 2, 1), s)], axis=1)
    j1 = j[:, 0]
    j2 = j[:, 1] + (j[:, 1] >= j1)
    lo_, hi_ = np.minimum(j1, j2), np.maximum(j1, j2)
    j3 = j[:, 2] + (j[:, 2] >= lo_)
    j3 = j3 + (j3 >= hi_)
    picks = np.stack([j1, j2, j3], axis=1)
    alts = picks + (picks >= home[:, None])
    alts[np.arange(3)[None, :] >= n_alt[:, None]] = -1
    return Profiles(home, alts, n_alt)


@dataclass(frozen=True)
class DayBatch:
    """Records of one day in emission order, plus that day's ground truth."""
    day: int
    subscriber: np.ndarray
    timestamp: np.ndarray
    tower: np.ndarray
    truth_subscriber: np.ndarray
    truth_tower: np.ndarray
    truth_events: np.ndarray


def generate_day(config: GeneratorConfig, prof: Profiles, day: int) -> DayBatch:
    rng = _rng(config, _DAY0 + day)
    s = config.n_subscribers
    u_silent = rng.random(s)
    u_travel = rng.random(s)
    u_alt = rng.random(s)
    n_ev = 1 + rng.poisson(max(config.mean_events_per_day - 1.0, 0.0), s)

    active = u_silent >= config.p_silent
    travel = (u_travel < config.p_travel) & (prof.n_alt > 0)
    alt_slot = np.minimum((u_alt * np.maximum(prof.n_alt, 1)).astype(np.int64), 2)
    dest = np.where(travel, prof.alternates[np.arange(s), alt_slot], prof.home)
    n_major = np.where(travel, n_ev // 2 + 1, n_ev)

    subs = np.flatnonzero(active)
    counts = n_ev[subs]
    total = int(counts.sum())
    sub_e = np.repeat(subs, counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    pos = np.arange(total) - starts
    tower_e = np.where(pos < n_major[sub_e], dest[sub_e], prof.home[sub_e])
    ts_e = day * SECONDS_PER_DAY + rng.integers(0, SECONDS_PER_DAY, total)

    order = np.lexsort((pos, sub_e, ts_e))
    if config.shuffle_window > 1 and total:
        # random permutation inside consecutive blocks of shuffle_window records
        noise = rng.random(total)
        order = order[np.lexsort((noise, np.arange(total) // config.shuffle_window))]
    return DayBatch(day, sub_e[order], ts_e[order], tower_e[order], subs, dest[subs], counts)


def iter_days(config: GeneratorConfig) -> Iterator[DayBatch]:
    prof = profiles(config)
    for day in range(config.n_days):
        yield generate_day(config, prof, day)


def generate(config: GeneratorConfig) -> tuple[Iterator[RawCdrRecord], Iterator[tuple[str, int, str, int]]]:
    """Lazy record stream and ground-truth rows ``(subscriber_id, day, tower_id, events)``."""
    names = tower_ids(config.n_towers)

    def records():
        for b in iter_days(config):
            for sub, ts, tw in zip(b.subscriber.tolist(), b.timestamp.tolist(), b.tower.tolist()):
                yield RawCdrRecord(subscriber_id(sub), ts, names[tw])

    def truth():
        for b in iter_days(config):
            for sub, tw, n in zip(b.truth_subscriber.tolist(), b.truth_tower.tolist(), b.truth_events.tolist()):
                yield subscriber_id(sub), b.day, names[tw], n

    return records(), truth()


def write_synthetic(config: GeneratorConfig, cdr_path: str | Path, truth_path: str | Path | None = None) -> int:
    """Stream records (and optionally ground truth) to CSV. Returns the record count."""
    names = np.array(tower_ids(config.n_towers), dtype=object)
    n = 0
    truth_f = open(truth_path, "w", encoding="utf-8", newline="\n") if truth_path else None
    try:
        if truth_f:
            truth_f.write(TRUTH_HEADER + "\n")
        with open(cdr_path, "w", encoding="utf-8", newline="\n") as f:
            for b in iter_days(config):
                if len(b.subscriber):
                    f.write("".join(
                        f"923{s:09d},{t},{w}\n"
                        for s, t, w in zip(b.subscriber.tolist(), b.timestamp.tolist(), names[b.tower])
                    ))
                n += len(b.subscriber)
                if truth_f and len(b.truth_subscriber):
                    truth_f.write("".join(
                        f"923{s:09d},{b.day},{w},{e}\n"
                        for s, w, e in zip(b.truth_subscriber.tolist(), names[b.truth_tower], b.truth_events.tolist())
                    ))
    finally:
        if truth_f:
            truth_f.close()
    return n


def synth_registry(config: GeneratorConfig) -> TowerRegistry:
    """Towers with fabricated coordinates, split into contiguous region blocks."""
    rng = _rng(config, _REGISTRY)
    t = config.n_towers
    lat = rng.uniform(*_LAT, t)
    lon = rng.uniform(*_LON, t)
    n_regions = min(config.n_regions, t)
    entries = []
    for i, name in enumerate(tower_ids(t)):
        region = f"R{(i * n_regions) // t:02d}"
        entries.append((name, Tower(round(float(lat[i]), 6), round(float(lon[i]), 6), region)))
    return TowerRegistry(entries)


def write_registry_for(config: GeneratorConfig, path: str | Path) -> TowerRegistry:
    reg = synth_registry(config)
    write_registry(path, reg)
    return reg
