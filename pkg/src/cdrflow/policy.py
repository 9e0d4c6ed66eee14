"""Release gate between the aggregate zone and the researcher export zone.

Policy file schema (flat ``key = value``, ``#`` comments, optional [policy]
header)::

    min_count_k = 10                # cells with 0 < count < k are suppressed/refused
    min_spatial_level = region      # tower | region
    min_window_days = 7
    allow_partial_windows = false
    forbidden_column_patterns =     # one regular expression per line,
        (?i)^pseudonym$             # matched against header names
        (?i)^msisdn$

Omitted keys take the defaults of :class:`ExportPolicy`.
"""
from __future__ import annotations

import configparser
import csv
import io
import logging
import os
import re
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from . import manifest
from .matrix import LEVELS, REGION, CountMatrix, describe_header, read_matrix, write_matrix
from .records import CdrError

log = logging.getLogger(__name__)

DEFAULT_K = 10

# Violation codes
INDIVIDUAL_COLUMN = "INDIVIDUAL_COLUMN"
TOKEN_VALUE = "TOKEN_VALUE"
BELOW_K = "BELOW_K"
GRANULARITY = "GRANULARITY"
WINDOW = "WINDOW"
PARTIAL_WINDOW = "PARTIAL_WINDOW"
PROVENANCE = "PROVENANCE"
MALFORMED = "MALFORMED"
IO_ERROR = "IO_ERROR"

TOKEN_PATTERN = re.compile(r"[0-9a-f]{32}")

DEFAULT_FORBIDDEN_COLUMNS = (
    r"(?i)^(pseudonym|token|subscriber(_?id)?|sim(_?id)?|msisdn|imsi|imei|phone(_?number)?|caller|callee|user(_?id)?)$",
    r"^[0-9a-f]{32}$",
    r"^\+?[0-9][0-9 ()-]{6,18}[0-9]$",
)


class PolicyViolation(CdrError):
    def __init__(self, violations: list["Violation"]):
        self.violations = violations
        super().__init__(f"{len(violations)} export policy violation(s): "
                         + ", ".join(sorted({v.code for v in violations})))


@dataclass(frozen=True)
class ExportPolicy:
    min_count_k: int = DEFAULT_K
    min_spatial_level: str = REGION
    min_window_days: int = 1
    allow_partial_windows: bool = False
    forbidden_column_patterns: tuple[str, ...] = DEFAULT_FORBIDDEN_COLUMNS

    def __post_init__(self):
        if self.min_count_k < 1:
            raise ValueError("min_count_k must be >= 1")
        if self.min_window_days < 1:
            raise ValueError("min_window_days must be >= 1")
        if self.min_spatial_level not in LEVELS:
            raise ValueError(f"min_spatial_level must be one of {LEVELS}")
        for p in self.forbidden_column_patterns:
            re.compile(p)

    def as_parameters(self) -> dict[str, Any]:
        d = asdict(self)
        d["forbidden_column_patterns"] = list(self.forbidden_column_patterns)
        return d


def load_policy(path: str | os.PathLike) -> ExportPolicy:
    text = Path(path).read_text(encoding="utf-8")
    if not text.lstrip().startswith("["):
        text = "[policy]\n" + text
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.read_string(text)
    if not parser.has_section("policy"):
        raise ValueError(f"{path}: no [policy] section")
    sec = parser["policy"]
    known = {"min_count_k", "min_spatial_level", "min_window_days", "allow_partial_windows",
             "forbidden_column_patterns"}
    unknown = set(sec) - known
    if unknown:
        raise ValueError(f"{path}: unknown policy keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    if "min_count_k" in sec:
        kwargs["min_count_k"] = sec.getint("min_count_k")
    if "min_spatial_level" in sec:
        kwargs["min_spatial_level"] = sec["min_spatial_level"].strip()
    if "min_window_days" in sec:
        kwargs["min_window_days"] = sec.getint("min_window_days")
    if "allow_partial_windows" in sec:
        kwargs["allow_partial_windows"] = sec.getboolean("allow_partial_windows")
    if "forbidden_column_patterns" in sec:
        lines = [ln.strip() for ln in sec["forbidden_column_patterns"].splitlines()]
        kwargs["forbidden_column_patterns"] = tuple(ln for ln in lines if ln)
    return ExportPolicy(**kwargs)


@dataclass(frozen=True)
class SuppressionStats:
    cells: int = 0
    total: int = 0


def suppress(m: CountMatrix, k: int) -> tuple[CountMatrix, SuppressionStats]:
    """Drop every cell with count below ``k``; k=1 is the identity."""
    if k < 1:
        raise ValueError("k must be >= 1")
    kept = {key: n for key, n in m.counts.items() if n >= k}
    dropped = [n for n in m.counts.values() if n < k]
    return m.with_counts(kept), SuppressionStats(len(dropped), sum(dropped))


def suppress_files(paths: Iterable[str | Path], out_dir: str | Path, k: int) -> dict[str, Any]:
    """Suppress a set of matrix files into ``out_dir`` and write its manifest.

    Partial-window flags are carried over from the inputs' own manifests.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [Path(p) for p in paths]
    entries: dict[str, dict[str, Any]] = {}
    for p in paths:
        m = read_matrix(p)
        found = manifest.find_entry(p)
        partial = list(found[1].get("partial_windows", [])) if found else []
        kept, stats = suppress(m, k)
        out = out_dir / p.name
        write_matrix(out, kept)
        entries[p.name] = {
            "digest": manifest.file_digest(out),
            "kind": m.kind,
            "spatial_level": m.level,
            "window_days": m.window_days,
            "partial_windows": [w for w in partial if any(key[0] == w for key in kept.counts)],
            "pre_suppression_total": m.total,
            "exported_total": kept.total,
            "suppressed_cells": stats.cells,
            "suppressed_total": stats.total,
        }
        log.info("suppress %s: k=%d, %d cells (total %d) removed", p.name, k, stats.cells, stats.total)
    man = manifest.build("suppress", paths, {"min_count_k": k}, entries)
    manifest.write(out_dir / "manifest.suppress.json", man)
    return man


@dataclass(frozen=True)
class Violation:
    code: str
    file: str
    line: int | None
    message: str

    def __str__(self) -> str:
        where = f"{self.file}:{self.line}" if self.line is not None else self.file
        return f"{self.code} {where}: {self.message}"


@dataclass
class ValidationResult:
    policy: ExportPolicy
    files: list[Path]
    digests: dict[str, str] = field(default_factory=dict)
    provenance: dict[str, dict[str, Any]] = field(default_factory=dict)
    violations: list[Violation] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def codes(self) -> set[str]:
        return {v.code for v in self.violations}


def _check_file(path: Path, policy: ExportPolicy, forbidden: list[re.Pattern],
                result: ValidationResult) -> None:
    name = path.name
    add = lambda code, line, msg: result.violations.append(Violation(code, name, line, msg))  # noqa: E731
    try:
        raw = path.read_bytes()
        text = raw.decode("utf-8")
    except OSError as exc:
        add(IO_ERROR, None, f"cannot read file: {exc.strerror}")
        return
    except UnicodeDecodeError:
        add(IO_ERROR, None, "file is not valid UTF-8")
        return
    result.digests[name] = manifest.file_digest(path)

    rows = list(csv.reader(io.StringIO(text, newline="")))
    if not rows:
        add(MALFORMED, None, "empty file (no header)")
        return
    header = rows[0]
    for col in header:
        if any(p.search(col) for p in forbidden):
            add(INDIVIDUAL_COLUMN, 1, f"column {col!r} matches a forbidden pattern")
    for lineno, row in enumerate(rows[1:], start=2):
        if any(TOKEN_PATTERN.search(cell) for cell in row):
            add(TOKEN_VALUE, lineno, "cell matches the pseudonym token pattern")

    desc = describe_header(header)
    if desc is None:
        add(MALFORMED, 1, "header is not a known aggregate schema")
        return
    kind, level, windowed = desc
    if LEVELS.index(level) < LEVELS.index(policy.min_spatial_level):
        add(GRANULARITY, None, f"{level}-level data, policy requires at least {policy.min_spatial_level}")

    found = manifest.find_entry(path)
    partial: set[int] | None = None
    if found is not None:
        result.provenance[name] = found[1]
        partial = set(found[1].get("partial_windows", []))

    width = len(header)
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            add(MALFORMED, lineno, f"expected {width} fields, got {len(row)}")
            continue
        try:
            count = int(row[-1])
            start = int(row[0])
            wd = int(row[1]) if windowed else 1
        except ValueError:
            add(MALFORMED, lineno, "non-integer day, window or count")
            continue
        if count < 1:
            add(MALFORMED, lineno, "non-positive count")
        elif count < policy.min_count_k:
            add(BELOW_K, lineno, f"count below k={policy.min_count_k}")
        if windowed and wd < policy.min_window_days:
            add(WINDOW, lineno, f"{wd}-day window, policy requires at least {policy.min_window_days}")
        if windowed and not policy.allow_partial_windows and partial is not None and start in partial:
            add(PARTIAL_WINDOW, lineno, f"window starting day {start} is partial")
    if not windowed and policy.min_window_days > 1:
        add(WINDOW, None, f"daily data, policy requires at least {policy.min_window_days}-day windows")
    if windowed and not policy.allow_partial_windows and partial is None and len(rows) > 1:
        add(PROVENANCE, None, "no manifest with a matching digest to establish window completeness")


def validate_export(paths: Iterable[str | Path], policy: ExportPolicy) -> ValidationResult:
    """Check a candidate export set against ``policy``; never raises on bad files."""
    result = ValidationResult(policy, [Path(p) for p in paths])
    forbidden = [re.compile(p) for p in policy.forbidden_column_patterns]
    if not result.files:
        result.violations.append(Violation(IO_ERROR, "-", None, "empty export candidate set"))
    for p in result.files:
        _check_file(p, policy, forbidden, result)
    return result


def candidate_files(in_dir: str | Path) -> list[Path]:
    """Export candidates in a directory: every CSV file, in name order."""
    return sorted(p for p in Path(in_dir).iterdir() if p.is_file() and p.suffix == ".csv")


def export(result: ValidationResult, zone_dir: str | Path,
           parameters: dict[str, Any] | None = None) -> dict[str, Any]:
    """Copy a validated file set plus ``manifest.json`` into the export zone.

    Refuses unless ``result`` passed and the files still hash to what was
    validated. Files are staged in a temporary directory inside the zone and
    moved in with ``os.replace``; the manifest is moved last.
    """
    if not isinstance(result, ValidationResult):
        raise TypeError("export requires the ValidationResult of validate_export")
    if not result.passed:
        raise PolicyViolation(result.violations)
    for p in result.files:
        if manifest.file_digest(p) != result.digests.get(p.name):
            raise PolicyViolation([Violation(PROVENANCE, p.name, None, "file changed after validation")])

    zone = Path(zone_dir)
    zone.mkdir(parents=True, exist_ok=True)
    entries: dict[str, dict[str, Any]] = {}
    for p in result.files:
        prov = result.provenance.get(p.name, {})
        entry = {"digest": result.digests[p.name]}
        for key in ("kind", "spatial_level", "window_days", "partial_windows", "pre_suppression_total",
                    "exported_total", "suppressed_cells", "suppressed_total"):
            if key in prov:
                entry[key] = prov[key]
        entries[p.name] = entry
    params = {"policy": result.policy.as_parameters()}
    if parameters:
        params.update(parameters)
    man = manifest.build("export", result.files, params, entries)

    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=zone))
    try:
        for p in result.files:
            shutil.copyfile(p, staging / p.name)
        manifest.write(staging / "manifest.json", man)
        for p in result.files:
            os.replace(staging / p.name, zone / p.name)
        os.replace(staging / "manifest.json", zone / "manifest.json")
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    log.info("export: %d file(s) released", len(result.files))
    return man
