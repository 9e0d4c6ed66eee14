"""Provenance manifests written next to every stage's outputs.

Digests use the Subresource Integrity form ``sha256-<base64>`` rather than
hex, so a manifest never contains a run of 32 lowercase hex characters that
could be mistaken for a pseudonym token by the export sweep.
"""
from __future__ import annotations

import base64
import datetime as _dt
import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable

from . import __version__

TIMESTAMP_FIELD = "created_at"


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return "sha256-" + base64.b64encode(h.digest()).decode("ascii")


def set_digest(digests: dict[str, str]) -> str:
    """Digest of a named file set, independent of listing order."""
    h = hashlib.sha256()
    for name in sorted(digests):
        h.update(f"{name}\x00{digests[name]}\n".encode())
    return "sha256-" + base64.b64encode(h.digest()).decode("ascii")


def input_digest(paths: Iterable[str | Path]) -> str:
    return set_digest({Path(p).name: file_digest(p) for p in paths})


def build(stage: str, inputs: Iterable[str | Path], parameters: dict[str, Any],
          files: dict[str, dict[str, Any]] | None = None, **extra: Any) -> dict[str, Any]:
    files = files or {}
    manifest = {
        "stage_name": stage,
        "tool_version": __version__,
        "input_digest": input_digest(inputs),
        "parameters": parameters,
        "files": files,
        "suppressed_cells": sum(f.get("suppressed_cells", 0) for f in files.values()),
        "suppressed_total": sum(f.get("suppressed_total", 0) for f in files.values()),
        "partial_windows": [
            {"file": name, "window_start_day": w}
            for name in sorted(files) for w in files[name].get("partial_windows", [])
        ],
        TIMESTAMP_FIELD: _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat(),
    }
    manifest.update(extra)
    return manifest


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write(path: str | Path, manifest: dict[str, Any]) -> None:
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read(path: str | Path) -> dict[str, Any]:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def without_timestamp(manifest: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in manifest.items() if k != TIMESTAMP_FIELD}


def find_entry(path: str | Path) -> tuple[dict[str, Any], dict[str, Any]] | None:
    """Locate the sibling manifest describing ``path`` with a matching digest.

    Returns (manifest, file entry) or None.
    """
    path = Path(path)
    digest = None
    for mpath in sorted(path.parent.glob("manifest*.json")):
        try:
            m = read(mpath)
        except (OSError, ValueError):
            continue
        entry = m.get("files", {}).get(path.name)
        if entry is None:
            continue
        if digest is None:
            digest = file_digest(path)
        if entry.get("digest") == digest:
            return m, entry
    return None
