"""Sharded, bounded-memory aggregation of de-identified CDR files.

Pass 1 streams the input in fixed-size blocks and appends each record, as a
28-byte binary row, to one of N shard files chosen by a hash of its pseudonym,
so every record of a subscriber lands in the same shard. Pass 2 loads one shard
at a time, sorts it, assigns daily locations and counts cells. Partial results
are merged by cell-wise addition, which makes the output independent of shard
processing order and worker count.

Peak memory is set by ``shard_rows`` and the reader block size, not by the
size of the input.
"""
from __future__ import annotations

import logging
import math
import multiprocessing
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.csv as pacsv

from .matrix import DAY_PAIR, MODES, CountMatrix, presence_matrix, transition_matrix
from .records import SECONDS_PER_DAY, IntegrityError

log = logging.getLogger(__name__)

SHARD_DTYPE = np.dtype([("hi", "<u8"), ("lo", "<u8"), ("ts", "<i8"), ("tw", "<i4")])
DEFAULT_SHARD_ROWS = 1 << 19
BLOCK_BYTES = 1 << 23
MAX_SHARDS = 256
_SPLIT_FANOUT = 8
_MAX_SPLIT_DEPTH = 3

_TOKEN = re.compile(r"[0-9a-f]{32}")


@dataclass
class EngineStats:
    records: int = 0
    shards: int = 0
    daily_locations: int = 0


def _estimate_rows(path: Path) -> int:
    size = path.stat().st_size
    with open(path, "rb") as f:
        sample = f.read(1 << 16)
    lines = sample.count(b"\n") or 1
    return max(1, math.ceil(size * lines / max(len(sample), 1)))


def _locate_bad_row(path: Path) -> IntegrityError:
    """Strict line scan used only after the fast reader rejects the input."""
    with open(path, encoding="utf-8", errors="replace", newline="\n") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split(",")
            if len(parts) != 3:
                return IntegrityError(f"de-identified input line {lineno}: expected 3 fields, got {len(parts)}")
            tok, ts, tower = parts
            if not _TOKEN.fullmatch(tok):
                return IntegrityError(f"de-identified input line {lineno}: malformed pseudonym")
            if not (ts.isascii() and ts.isdigit()) or int(ts) >= 1 << 62:
                return IntegrityError(f"de-identified input line {lineno}: malformed timestamp")
            if not tower or tower != tower.strip():
                return IntegrityError(f"de-identified input line {lineno}: malformed tower_id")
    return IntegrityError("de-identified input could not be read")


_READ_OPTS = pacsv.ReadOptions(column_names=["pseudonym", "timestamp", "tower_id"], use_threads=False,
                               block_size=2 * BLOCK_BYTES)
_PARSE_OPTS = pacsv.ParseOptions(quote_char=False, double_quote=False, escape_char=False,
                                 newlines_in_values=False, ignore_empty_lines=False)
_CONVERT_OPTS = pacsv.ConvertOptions(
    column_types={"pseudonym": pa.string(), "timestamp": pa.int64(), "tower_id": pa.string()},
    null_values=[], strings_can_be_null=False, quoted_strings_can_be_null=False,
)


def _iter_blocks(path: Path, block_bytes: int = BLOCK_BYTES):
    """Yield newline-terminated byte blocks of roughly ``block_bytes``."""
    carry = b""
    with open(path, "rb") as f:
        while True:
            chunk = f.read(block_bytes)
            if not chunk:
                break
            data = carry + chunk
            cut = data.rfind(b"\n") + 1
            if cut == 0:
                carry = data
                continue
            carry = data[cut:]
            yield data[:cut]
    if carry:
        yield carry


def _read_block(block: bytes) -> pa.Table:
    return pacsv.read_csv(pa.BufferReader(block), read_options=_READ_OPTS,
                          parse_options=_PARSE_OPTS, convert_options=_CONVERT_OPTS)


def _partition(path: Path, shard_dir: Path, n_shards: int) -> tuple[list[Path], list[str], int]:
    """Pass 1: hash-partition records into binary shard files."""
    paths = [shard_dir / f"shard-{i:04d}.bin" for i in range(n_shards)]
    towers: dict[str, int] = {}
    total = 0
    files = [open(p, "wb") for p in paths]
    try:
        if path.stat().st_size == 0:
            return paths, [], 0
        try:
            for block in _iter_blocks(path):
                for batch in _read_block(block).to_batches():
                    total += _partition_batch(batch, towers, files, n_shards)
        except (pa.ArrowInvalid, pa.ArrowTypeError, ValueError):
            raise _locate_bad_row(path) from None
    finally:
        for f in files:
            f.close()
    return paths, list(towers), total


def _partition_batch(batch: pa.RecordBatch, towers: dict[str, int], files, n_shards: int) -> int:
    n = batch.num_rows
    if n == 0:
        return 0
    ps = batch.column(0).dictionary_encode()
    uniq = ps.dictionary.to_pylist()
    if not all(_TOKEN.fullmatch(u) for u in uniq):
        raise ValueError("malformed pseudonym")
    hi_u = np.fromiter((int(u[:16], 16) for u in uniq), dtype=np.uint64, count=len(uniq))
    lo_u = np.fromiter((int(u[16:], 16) for u in uniq), dtype=np.uint64, count=len(uniq))
    idx = ps.indices.to_numpy()

    ts = batch.column(1)
    if pc.min(ts).as_py() < 0:
        raise ValueError("negative timestamp")

    tw = batch.column(2).dictionary_encode()
    names = tw.dictionary.to_pylist()
    if not all(names) or any(t != t.strip() for t in names):
        raise ValueError("malformed tower id")
    codes = np.fromiter((towers.setdefault(t, len(towers)) for t in names), dtype=np.int32, count=len(names))

    rec = np.empty(n, dtype=SHARD_DTYPE)
    rec["hi"] = hi_u[idx]
    rec["lo"] = lo_u[idx]
    rec["ts"] = ts.to_numpy()
    rec["tw"] = codes[tw.indices.to_numpy()]

    shard = rec["hi"] % np.uint64(n_shards)
    order = np.argsort(shard, kind="stable")
    rec = rec[order]
    bounds = np.searchsorted(shard[order], np.arange(n_shards + 1, dtype=np.uint64))
    for i in range(n_shards):
        lo, hi = bounds[i], bounds[i + 1]
        if hi > lo:
            rec[lo:hi].tofile(files[i])
    return n


def _split_hash(rec: np.ndarray, depth: int) -> np.ndarray:
    return ((rec["lo"] >> np.uint64(16 * (depth - 1))) & np.uint64(0xFFFF)) % np.uint64(_SPLIT_FANOUT)


def _expand_oversized(paths: list[Path], shard_rows: int, depth: int = 1) -> list[Path]:
    """Re-split shards far above the row target (hash skew or a bad estimate)."""
    out: list[Path] = []
    for p in paths:
        rows = p.stat().st_size // SHARD_DTYPE.itemsize
        if rows <= 4 * shard_rows or depth > _MAX_SPLIT_DEPTH:
            out.append(p)
            continue
        subs = [p.with_name(f"{p.stem}.{i}.bin") for i in range(_SPLIT_FANOUT)]
        mm = np.memmap(p, dtype=SHARD_DTYPE, mode="r")
        files = [open(s, "wb") for s in subs]
        try:
            for start in range(0, rows, shard_rows):
                chunk = np.asarray(mm[start:start + shard_rows])
                h = _split_hash(chunk, depth)
                for i in range(_SPLIT_FANOUT):
                    chunk[h == i].tofile(files[i])
        finally:
            for f in files:
                f.close()
            del mm
        p.unlink()
        out.extend(_expand_oversized(subs, shard_rows, depth + 1))
    return out


def aggregate_block(rec: np.ndarray, tower_rank: np.ndarray, offset_seconds: int, mode: str,
                    bridge_gap: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, int]:
    """Aggregate one shard holding every record of its pseudonyms.

    Returns (presence keys, presence counts, transition keys, transition
    counts, number of daily locations). Keys encode (day, rank) as
    ``day*T + rank`` and (day, from, to) as ``(day*T + from)*T + to``.
    """
    empty = np.empty(0, dtype=np.int64)
    n = len(rec)
    if n == 0:
        return empty, empty, empty, empty, 0
    n_towers = np.int64(len(tower_rank))
    hi = rec["hi"]
    lo = rec["lo"]
    ts = rec["ts"]
    rank = tower_rank[rec["tw"]].astype(np.int64)
    day = (ts + offset_seconds) // SECONDS_PER_DAY

    # (pseudonym, day, tower) groups with event count and earliest timestamp
    o = np.lexsort((ts, rank, day, lo, hi))
    s_hi, s_lo, s_day, s_rank, s_ts = hi[o], lo[o], day[o], rank[o], ts[o]
    brk = np.empty(n, dtype=bool)
    brk[0] = True
    brk[1:] = (s_hi[1:] != s_hi[:-1]) | (s_lo[1:] != s_lo[:-1]) | (s_day[1:] != s_day[:-1]) \
        | (s_rank[1:] != s_rank[:-1])
    starts = np.flatnonzero(brk)
    cnt = np.diff(np.append(starts, n))
    g_hi, g_lo, g_day, g_rank, g_first = s_hi[starts], s_lo[starts], s_day[starts], s_rank[starts], s_ts[starts]
    del s_hi, s_lo, s_day, s_rank, s_ts, brk

    # modal tower: most events, then earliest first event, then smallest id
    o2 = np.lexsort((g_rank, g_first, -cnt, g_day, g_lo, g_hi))
    g_hi, g_lo, g_day, g_rank = g_hi[o2], g_lo[o2], g_day[o2], g_rank[o2]
    first = np.empty(len(o2), dtype=bool)
    first[0] = True
    first[1:] = (g_hi[1:] != g_hi[:-1]) | (g_lo[1:] != g_lo[:-1]) | (g_day[1:] != g_day[:-1])
    l_hi, l_lo, l_day, l_rank = g_hi[first], g_lo[first], g_day[first], g_rank[first]

    p_keys, p_counts = np.unique(l_day * n_towers + l_rank, return_counts=True)

    if mode == DAY_PAIR:
        same = (l_hi[1:] == l_hi[:-1]) & (l_lo[1:] == l_lo[:-1])
        v = same & (l_day[1:] - l_day[:-1] <= 1 + bridge_gap)
        keys = (l_day[:-1][v] * n_towers + l_rank[:-1][v]) * n_towers + l_rank[1:][v]
    else:
        o3 = np.lexsort((rank, ts, lo, hi))
        e_hi, e_lo, e_day, e_rank = hi[o3], lo[o3], day[o3], rank[o3]
        v = (e_hi[1:] == e_hi[:-1]) & (e_lo[1:] == e_lo[:-1]) & (e_day[1:] == e_day[:-1]) \
            & (e_rank[1:] != e_rank[:-1])
        keys = (e_day[:-1][v] * n_towers + e_rank[:-1][v]) * n_towers + e_rank[1:][v]
    t_keys, t_counts = np.unique(keys, return_counts=True)
    return p_keys, p_counts.astype(np.int64), t_keys, t_counts.astype(np.int64), int(first.sum())


def _shard_job(args):
    path, tower_rank, offset_seconds, mode, bridge_gap = args
    rec = np.fromfile(path, dtype=SHARD_DTYPE)
    return aggregate_block(rec, tower_rank, offset_seconds, mode, bridge_gap)


def aggregate_file(
    path: str | os.PathLike,
    mode: str = DAY_PAIR,
    bridge_gap: int = 0,
    utc_offset_minutes: int = 0,
    threads: int = 1,
    shard_rows: int = DEFAULT_SHARD_ROWS,
    tmp_dir: str | os.PathLike | None = None,
) -> tuple[CountMatrix, CountMatrix, EngineStats]:
    """Presence and transition matrices for a de-identified CDR file."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if bridge_gap < 0:
        raise ValueError("bridge_gap must be >= 0")
    if threads < 1:
        raise ValueError("threads must be >= 1")
    path = Path(path)
    n_shards = min(MAX_SHARDS, max(1, math.ceil(_estimate_rows(path) / shard_rows)))
    stats = EngineStats()

    with tempfile.TemporaryDirectory(prefix="cdrflow-shards-", dir=tmp_dir) as tmp:
        shard_paths, tower_names, stats.records = _partition(path, Path(tmp), n_shards)
        shard_paths = _expand_oversized(shard_paths, shard_rows)
        stats.shards = len(shard_paths)

        # tower codes are first-seen order; ranks follow sorted tower ids
        names_sorted = sorted(tower_names)
        rank_of = {t: i for i, t in enumerate(names_sorted)}
        tower_rank = np.array([rank_of[t] for t in tower_names], dtype=np.int64)
        jobs = [(p, tower_rank, utc_offset_minutes * 60, mode, bridge_gap) for p in shard_paths]

        p_acc: dict[int, int] = {}
        t_acc: dict[int, int] = {}
        if threads == 1 or len(jobs) <= 1:
            results = map(_shard_job, jobs)
            pool = None
        else:
            pool = multiprocessing.get_context("fork").Pool(min(threads, len(jobs)))
            results = pool.imap(_shard_job, jobs)
        try:
            for p_keys, p_counts, t_keys, t_counts, n_loc in results:
                stats.daily_locations += n_loc
                for k, c in zip(p_keys.tolist(), p_counts.tolist()):
                    p_acc[k] = p_acc.get(k, 0) + c
                for k, c in zip(t_keys.tolist(), t_counts.tolist()):
                    t_acc[k] = t_acc.get(k, 0) + c
        finally:
            if pool is not None:
                pool.close()
                pool.join()

    n_t = len(names_sorted)
    presence = {}
    for k, c in p_acc.items():
        day, r = divmod(k, n_t)
        presence[(day, names_sorted[r])] = c
    transitions = {}
    for k, c in t_acc.items():
        rest, to = divmod(k, n_t)
        day, frm = divmod(rest, n_t)
        transitions[(day, names_sorted[frm], names_sorted[to])] = c
    log.info("aggregate: %d records in %d shards, %d subscriber-days, %d presence cells, %d transition cells",
             stats.records, stats.shards, stats.daily_locations, len(presence), len(transitions))
    return presence_matrix(presence), transition_matrix(transitions, mode), stats
