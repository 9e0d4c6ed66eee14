"""Recompute a zone2 directory from raw CDRs with the brute-force oracle and diff."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import manifest
from .matrix import DAY_PAIR, CountMatrix, read_matrix
from .oracle import oracle_presence, oracle_region_presence, oracle_region_rollup, oracle_transitions
from .pipeline import PRESENCE_FILE, REGION_PRESENCE_FILE, REGION_TRANSITIONS_FILE, TRANSITIONS_FILE
from .pseudonym import DeidRecord, load_key, pseudonymize_id
from .records import CdrError, CdrParseError, load_registry, parse_cdr_line

log = logging.getLogger(__name__)

ORACLE_RECORD_LIMIT = 100_000


@dataclass
class VerifyReport:
    results: dict[str, tuple[bool, str]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return bool(self.results) and all(ok for ok, _ in self.results.values())

    def lines(self) -> list[str]:
        return [f"{'OK ' if ok else 'MISMATCH'} {name}: {detail}" for name, (ok, detail) in self.results.items()]


def _compare(expected: CountMatrix, actual: CountMatrix) -> tuple[bool, str]:
    if expected.counts == actual.counts:
        return True, f"{len(actual.counts)} cells, total {actual.total}"
    missing = len(expected.counts.keys() - actual.counts.keys())
    extra = len(actual.counts.keys() - expected.counts.keys())
    differ = sum(1 for k in expected.counts.keys() & actual.counts.keys() if expected.counts[k] != actual.counts[k])
    return False, f"{missing} missing, {extra} unexpected, {differ} differing cells"


def load_deid_from_raw(raw: Path, key_file, epoch: str, registry) -> list[DeidRecord]:
    key = load_key(epoch, key_file)
    out = []
    with open(raw, encoding="utf-8", newline="\n") as f:
        for lineno, line in enumerate(f, start=1):
            try:
                rec = parse_cdr_line(line, lineno)
            except CdrParseError:
                continue
            if rec.tower_id not in registry:
                continue
            out.append(DeidRecord(pseudonymize_id(rec.subscriber_id, key), rec.timestamp, rec.tower_id))
    return out


def verify_zone(raw: Path, against: Path, registry_path: Path, key_file=None,
                epoch: str | None = None) -> VerifyReport:
    agg_path = against / "manifest.aggregate.json"
    if not agg_path.exists():
        raise CdrError(f"{against} has no manifest.aggregate.json")
    params = manifest.read(agg_path).get("parameters", {})
    epoch = epoch or params.get("epoch")
    if not epoch:
        raise CdrError("epoch label unknown: pass --epoch")
    mode = params.get("mode", DAY_PAIR)
    gap = int(params.get("bridge_gap", 0))
    offset = int(params.get("utc_offset_minutes", 0))
    registry = load_registry(registry_path)

    records = load_deid_from_raw(raw, key_file, epoch, registry)
    if len(records) > ORACLE_RECORD_LIMIT:
        log.warning("verify: %d records exceeds the oracle's intended size", len(records))

    report = VerifyReport()
    report.results[PRESENCE_FILE] = _compare(oracle_presence(records, offset), read_matrix(against / PRESENCE_FILE))
    report.results[TRANSITIONS_FILE] = _compare(oracle_transitions(records, mode, gap, offset),
                                                read_matrix(against / TRANSITIONS_FILE))
    rollup_path = against / "manifest.rollup.json"
    if rollup_path.exists():
        rman = manifest.read(rollup_path)
        window = int(rman["parameters"]["window_days"])
        origin = rman["parameters"].get("origin_day")
        for name, expected in (
            (REGION_PRESENCE_FILE, oracle_region_presence(records, registry, window, offset, origin)),
            (REGION_TRANSITIONS_FILE, oracle_region_rollup(records, registry, window, mode, gap, offset, origin)),
        ):
            ok, detail = _compare(expected, read_matrix(against / name))
            flagged = sorted(rman["files"][name].get("partial_windows", []))
            if flagged != sorted(expected.partial_windows):
                ok, detail = False, detail + "; partial-window flags differ"
            report.results[name] = (ok, detail)
    return report
