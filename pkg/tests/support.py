"""Shared helpers for the test suite (not a test module)."""
from __future__ import annotations

import json
import os
import subprocess
import sys
from pathlib import Path

from cdrflow.pseudonym import DeidRecord, PseudonymKey, pseudonymize_id
from cdrflow.synth import GeneratorConfig, generate, synth_registry

KEY_BYTES = bytes(range(32))
OTHER_KEY_BYTES = bytes(range(100, 132))
EPOCH = "test-epoch"


def key(material: bytes = KEY_BYTES, epoch: str = EPOCH) -> PseudonymKey:
    return PseudonymKey(material, epoch)


def deid_records(config: GeneratorConfig, k: PseudonymKey | None = None) -> list[DeidRecord]:
    k = k or key()
    records, _ = generate(config)
    tokens: dict[str, str] = {}
    out = []
    for r in records:
        tok = tokens.get(r.subscriber_id)
        if tok is None:
            tok = tokens[r.subscriber_id] = pseudonymize_id(r.subscriber_id, k)
        out.append(DeidRecord(tok, r.timestamp, r.tower_id))
    return out


def write_deid(path: Path, records) -> Path:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(r.to_line() + "\n")
    return path


def registry_for(config: GeneratorConfig):
    return synth_registry(config)


def write_pipeline_config(root: Path, *, policy: dict | None = None, **values) -> Path:
    """Write key.bin, policy.cfg and run.cfg under ``root``; returns run.cfg."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "key.bin").write_bytes(KEY_BYTES)
    pol = {"min_count_k": 5, "min_spatial_level": "region", "min_window_days": 7,
           "allow_partial_windows": "true"}
    pol.update(policy or {})
    (root / "policy.cfg").write_text("".join(f"{k} = {v}\n" for k, v in pol.items()))
    cfg = {"n_subscribers": 40, "n_towers": 6, "n_days": 10, "mean_events_per_day": 4, "p_travel": 0.3,
           "p_silent": 0.1, "shuffle_window": 5, "seed": 3, "n_regions": 2, "key_file": "key.bin",
           "epoch": "proj-1", "window_days": 7, "policy": "policy.cfg"}
    cfg.update(values)
    path = root / "run.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in cfg.items() if v is not None))
    return path


def run_cli(*args, cwd: Path | None = None, env: dict | None = None) -> subprocess.CompletedProcess:
    full_env = dict(os.environ)
    full_env.pop("CDR_KEY_FILE", None)
    full_env.update(env or {})
    return subprocess.run([sys.executable, "-m", "cdrflow.cli", *map(str, args)], cwd=cwd, env=full_env,
                          capture_output=True, text=True, timeout=300)


def tree_bytes(root: Path) -> dict[str, bytes]:
    """Every file under ``root`` by relative path; manifest timestamps blanked."""
    out = {}
    for p in sorted(Path(root).rglob("*")):
        if not p.is_file():
            continue
        data = p.read_bytes()
        if p.name.startswith("manifest") and p.suffix == ".json":
            doc = json.loads(data)
            doc.pop("created_at", None)
            data = json.dumps(doc, sort_keys=True).encode()
        out[str(p.relative_to(root))] = data
    return out


# -- export policy fixtures -----------------------------------------------

GOOD_REGION_ROWS = "window_start_day,window_days,from_region,to_region,count\n0,7,R00,R00,12\n0,7,R00,R01,16\n"


def stamp(directory: Path, partial: dict[str, list[int]] | None = None) -> None:
    """Write a provenance manifest covering every CSV in ``directory``."""
    from cdrflow import manifest
    partial = partial or {}
    files = {p.name: {"digest": manifest.file_digest(p), "partial_windows": partial.get(p.name, [])}
             for p in sorted(Path(directory).glob("*.csv"))}
    manifest.write(Path(directory) / "manifest.suppress.json", manifest.build("suppress", [], {}, files))


def violation_fixtures(root: Path) -> list[tuple[str, list[Path]]]:
    """(expected violation code, candidate files) pairs, one per constructed violation.

    All are judged against ``strict_policy()``.
    """
    cases: list[tuple[str, str, str, dict | None]] = [
        ("INDIVIDUAL_COLUMN", "ids.csv",
         "window_start_day,window_days,pseudonym,count\n0,7,R00,12\n", None),
        ("TOKEN_VALUE", "tokens.csv",
         "window_start_day,window_days,region_id,count\n0,7," + "0123456789abcdef" * 2 + ",12\n", None),
        ("BELOW_K", "small.csv",
         "window_start_day,window_days,region_id,count\n0,7,R00,12\n0,7,R01,3\n", None),
        ("GRANULARITY", "towers.csv", "day,tower_id,count\n0,T001,40\n", None),
        ("WINDOW", "daily.csv", "window_start_day,window_days,region_id,count\n0,1,R00,12\n", None),
        ("PARTIAL_WINDOW", "partial.csv",
         "window_start_day,window_days,region_id,count\n0,7,R00,12\n7,7,R00,11\n", {"partial.csv": [7]}),
        ("PROVENANCE", "unstamped.csv", GOOD_REGION_ROWS, False),
        ("MALFORMED", "ragged.csv", "window_start_day,window_days,region_id,count\n0,7,R00\n", None),
    ]
    out = []
    for code, name, text, partial in cases:
        d = Path(root) / code.lower()
        d.mkdir(parents=True)
        (d / name).write_text(text, encoding="utf-8")
        if partial is not False:
            stamp(d, partial)
        out.append((code, [d / name]))
    out.append(("IO_ERROR", [Path(root) / "missing" / "absent.csv"]))
    return out


def strict_policy():
    from cdrflow.policy import ExportPolicy
    return ExportPolicy(min_count_k=10, min_spatial_level="region", min_window_days=7,
                        allow_partial_windows=False)
