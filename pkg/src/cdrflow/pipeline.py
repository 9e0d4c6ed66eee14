"""Stage runners and the end-to-end pipeline over the four trust zones.

zone0-raw        raw CDRs, registry, ground truth, quarantined rows
zone1-deid       pseudonymized records
zone2-aggregate  tower and region matrices; ``release/`` holds suppressed candidates
zone3-export     policy-passing files and their manifest only

Every stage writes ``manifest.<stage>.json`` beside its outputs. Manifests
record semantic parameters and file digests only; worker counts and
absolute paths are left out so the outputs stay byte-identical across runs.
"""
from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import manifest
from .engine import aggregate_file
from .matrix import DAY_PAIR, MODES, read_matrix, write_matrix
from .policy import (
    ExportPolicy,
    PolicyViolation,
    candidate_files,
    export,
    load_policy,
    suppress_files,
    validate_export,
)
from .pseudonym import load_key, pseudonymize_file
from .records import CdrError, load_registry
from .rollup import presence_span, rollup
from .synth import GeneratorConfig, config_from_mapping, read_flat_config, write_registry_for, write_synthetic

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_POLICY = 2

PRESENCE_FILE = "presence.csv"
TRANSITIONS_FILE = "transitions.csv"
REGION_PRESENCE_FILE = "region_presence.csv"
REGION_TRANSITIONS_FILE = "region_transitions.csv"
DEID_FILE = "deid.csv"
RELEASE_DIR = "release"


class StageError(CdrError):
    def __init__(self, stage: str, message: str, exit_code: int = EXIT_ERROR):
        self.stage = stage
        self.exit_code = exit_code
        super().__init__(f"[{stage}] {message}")


def _entry(path: Path, **extra: Any) -> dict[str, Any]:
    return {"digest": manifest.file_digest(path), **extra}


def run_synth(config: GeneratorConfig, out: Path, truth: Path | None = None,
              registry_out: Path | None = None) -> int:
    n = write_synthetic(config, out, truth)
    if registry_out is not None:
        write_registry_for(config, registry_out)
    log.info("synth: %d records for %d subscribers over %d days", n, config.n_subscribers, config.n_days)
    return n


def run_pseudonymize(raw: Path, out: Path, epoch: str, key_file: str | Path | None = None,
                     registry: Path | None = None, rejects: Path | None = None) -> dict[str, Any]:
    key = load_key(epoch, key_file)  # fatal before any input is touched
    reg = load_registry(registry) if registry else None
    out.parent.mkdir(parents=True, exist_ok=True)
    stats = pseudonymize_file(raw, out, key, reg, rejects)
    inputs = [raw] + ([registry] if registry else [])
    man = manifest.build(
        "pseudonymize", inputs, {"epoch": epoch, "registry_validation": registry is not None},
        {out.name: _entry(out, records=stats.records_out)},
        records_in=stats.records_in, rejected=stats.rejected,
    )
    manifest.write(out.parent / "manifest.pseudonymize.json", man)
    return man


def run_aggregate(deid: Path, out_presence: Path, out_transitions: Path, mode: str = DAY_PAIR,
                  bridge_gap: int = 0, utc_offset_minutes: int = 0, threads: int = 1) -> dict[str, Any]:
    out_presence.parent.mkdir(parents=True, exist_ok=True)
    out_transitions.parent.mkdir(parents=True, exist_ok=True)
    presence, transitions, stats = aggregate_file(
        deid, mode=mode, bridge_gap=bridge_gap, utc_offset_minutes=utc_offset_minutes, threads=threads,
        tmp_dir=out_presence.parent,
    )
    write_matrix(out_presence, presence)
    write_matrix(out_transitions, transitions)
    params: dict[str, Any] = {"mode": mode, "bridge_gap": bridge_gap, "utc_offset_minutes": utc_offset_minutes}
    upstream = deid.parent / "manifest.pseudonymize.json"
    if upstream.exists():
        params["epoch"] = manifest.read(upstream).get("parameters", {}).get("epoch")
    man = manifest.build(
        "aggregate", [deid], params,
        {
            out_presence.name: _entry(out_presence, kind="presence", spatial_level="tower", window_days=1),
            out_transitions.name: _entry(out_transitions, kind="transitions", spatial_level="tower",
                                         window_days=1, mode=mode),
        },
        records=stats.records, subscriber_days=stats.daily_locations,
    )
    manifest.write(out_presence.parent / "manifest.aggregate.json", man)
    return man


def run_rollup(presence_path: Path, transitions_path: Path, registry_path: Path, window_days: int,
               out_dir: Path, origin_day: int | None = None) -> dict[str, Any]:
    """Region-level windowed matrices; windows share one origin and end day."""
    registry = load_registry(registry_path)
    presence = read_matrix(presence_path)
    transitions = read_matrix(transitions_path)
    span = presence_span(presence)
    first, last = span if span else (None, None)
    origin = first if origin_day is None else origin_day
    out_dir.mkdir(parents=True, exist_ok=True)
    region_p = rollup(presence, registry, window_days, origin, last)
    region_t = rollup(transitions, registry, window_days, origin, last)
    entries = {}
    for name, m in ((REGION_PRESENCE_FILE, region_p), (REGION_TRANSITIONS_FILE, region_t)):
        path = out_dir / name
        write_matrix(path, m)
        entries[name] = _entry(path, kind=m.kind, spatial_level=m.level, window_days=window_days,
                               partial_windows=list(m.partial_windows), total=m.total)
    man = manifest.build(
        "rollup", [presence_path, transitions_path, registry_path],
        {"window_days": window_days, "origin_day": origin, "last_day": last},
        entries,
    )
    manifest.write(out_dir / "manifest.rollup.json", man)
    if any(m.partial_windows for m in (region_p, region_t)):
        log.info("rollup: trailing partial window(s) flagged in manifest")
    return man


def run_export(policy: ExportPolicy, in_dir: Path, zone: Path) -> int:
    files = candidate_files(in_dir)
    result = validate_export(files, policy)
    if not result.passed:
        for v in result.violations:
            log.error("policy violation: %s", v)
        return EXIT_POLICY
    upstream = {}
    sup = in_dir / "manifest.suppress.json"
    if sup.exists():
        upstream["suppress_min_count_k"] = manifest.read(sup).get("parameters", {}).get("min_count_k")
    export(result, zone, upstream)
    return EXIT_OK


@dataclass
class PipelineConfig:
    zone0: Path
    zone1: Path
    zone2: Path
    zone3: Path
    generator: GeneratorConfig | None = None
    raw: Path | None = None
    registry: Path | None = None
    policy: Path | None = None
    key_file: Path | None = None
    epoch: str = "epoch-1"
    mode: str = DAY_PAIR
    bridge_gap: int = 0
    window_days: int = 7
    origin_day: int | None = None
    rollup: bool = True
    utc_offset_minutes: int = 0
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        zones = [Path(z).resolve() for z in (self.zone0, self.zone1, self.zone2, self.zone3)]
        if len(set(zones)) != 4:
            raise ValueError("the four zone directories must be distinct")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.bridge_gap < 0 or self.window_days < 1:
            raise ValueError("bridge_gap must be >= 0 and window_days >= 1")
        if self.raw is None and self.generator is None:
            raise ValueError("config needs either a raw CDR file or generator settings")

    def parameters(self) -> dict[str, Any]:
        return {"epoch": self.epoch, "mode": self.mode, "bridge_gap": self.bridge_gap,
                "window_days": self.window_days, "rollup": self.rollup,
                "utc_offset_minutes": self.utc_offset_minutes}


_GENERATOR_KEYS = {"n_subscribers", "n_towers", "n_days", "mean_events_per_day", "p_travel", "p_silent",
                   "shuffle_window", "seed", "n_regions"}
_PATH_KEYS = ("zone0", "zone1", "zone2", "zone3", "raw", "registry", "policy", "key_file")
_ZONE_DEFAULTS = {"zone0": "zone0-raw", "zone1": "zone1-deid", "zone2": "zone2-aggregate",
                  "zone3": "zone3-export"}
_TRUE = {"1", "true", "yes", "on"}


def config_from_values(values: dict[str, str], base_dir: Path | None = None) -> PipelineConfig:
    """Build a PipelineConfig from flat string values (config file + overrides).

    Relative paths resolve against ``base_dir``. Zones not named explicitly
    default to ``<work_dir>/zone0-raw`` and so on.
    """
    base = base_dir or Path.cwd()
    v = {k: val.strip() for k, val in values.items()}

    def path(key: str) -> Path | None:
        raw = v.get(key)
        return base / raw if raw else None

    work = path("work_dir") or base
    zones = {key: path(key) or work / default for key, default in _ZONE_DEFAULTS.items()}
    gen_values = {k: v[k] for k in _GENERATOR_KEYS if k in v}
    known = _GENERATOR_KEYS | set(_PATH_KEYS) | {"work_dir", "epoch", "mode", "bridge_gap", "window_days",
                                                  "origin_day", "rollup", "utc_offset_minutes", "threads"}
    return PipelineConfig(
        **zones,
        generator=config_from_mapping(gen_values) if gen_values else None,
        raw=path("raw"),
        registry=path("registry"),
        policy=path("policy"),
        key_file=path("key_file"),
        epoch=v.get("epoch", "epoch-1"),
        mode=v.get("mode", DAY_PAIR),
        bridge_gap=int(v.get("bridge_gap", 0)),
        window_days=int(v.get("window_days", 7)),
        origin_day=int(v["origin_day"]) if v.get("origin_day") else None,
        rollup=v.get("rollup", "true").lower() in _TRUE,
        utc_offset_minutes=int(v.get("utc_offset_minutes", 0)),
        extra={k: val for k, val in v.items() if k not in known},
    )


def load_pipeline_config(path: str | Path, overrides: dict[str, str] | None = None) -> PipelineConfig:
    values = read_flat_config(path, "pipeline")
    values.update(overrides or {})
    return config_from_values(values, Path(path).resolve().parent)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except PolicyViolation as exc:
        raise StageError(name, str(exc), EXIT_POLICY) from exc
    except (CdrError, OSError, ValueError) as exc:
        raise StageError(name, str(exc)) from exc


def run_pipeline(cfg: PipelineConfig, threads: int = 1, start_at: str = "pseudonymize") -> int:
    """Run every stage in order; returns 0, or raises StageError carrying the exit code."""
    if start_at not in ("pseudonymize", "aggregate"):
        raise ValueError("start_at must be 'pseudonymize' or 'aggregate'")
    for z in (cfg.zone0, cfg.zone1, cfg.zone2, cfg.zone3):
        Path(z).mkdir(parents=True, exist_ok=True)
    policy = _stage("validate", load_policy, cfg.policy) if cfg.policy else ExportPolicy()

    raw = cfg.raw
    registry = cfg.registry
    if start_at == "pseudonymize":
        if raw is None:
            raw = cfg.zone0 / "cdr.csv"
            reg_out = None
            if registry is None:
                registry = reg_out = cfg.zone0 / "towers.csv"
            _stage("synth", run_synth, cfg.generator, raw, cfg.zone0 / "truth.csv", reg_out)
        _stage("pseudonymize", run_pseudonymize, raw, cfg.zone1 / DEID_FILE, cfg.epoch, cfg.key_file,
               registry, cfg.zone0 / f"{raw.name}.rejects.csv")
    elif registry is None and (cfg.zone0 / "towers.csv").exists():
        registry = cfg.zone0 / "towers.csv"

    z2 = cfg.zone2
    _stage("aggregate", run_aggregate, cfg.zone1 / DEID_FILE, z2 / PRESENCE_FILE, z2 / TRANSITIONS_FILE,
           cfg.mode, cfg.bridge_gap, cfg.utc_offset_minutes, threads)

    candidates = [z2 / PRESENCE_FILE, z2 / TRANSITIONS_FILE]
    if cfg.rollup:
        if registry is None:
            raise StageError("rollup", "no tower registry configured")
        _stage("rollup", run_rollup, z2 / PRESENCE_FILE, z2 / TRANSITIONS_FILE, registry, cfg.window_days, z2,
               cfg.origin_day)
        candidates = [z2 / REGION_PRESENCE_FILE, z2 / REGION_TRANSITIONS_FILE]

    release = z2 / RELEASE_DIR
    shutil.rmtree(release, ignore_errors=True)
    _stage("suppress", suppress_files, candidates, release, policy.min_count_k)

    files = candidate_files(release)
    result = _stage("validate", validate_export, files, policy)
    if not result.passed:
        for v in result.violations:
            log.error("policy violation: %s", v)
        raise StageError("validate", f"{len(result.violations)} violation(s): "
                         + ", ".join(sorted(result.codes())), EXIT_POLICY)
    _stage("export", export, result, cfg.zone3, {"pipeline": cfg.parameters(),
                                                "suppress_min_count_k": policy.min_count_k})
    log.info("pipeline: complete")
    return EXIT_OK
