import hmac

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cdrflow.pipeline import run_pseudonymize
from cdrflow.pseudonym import (
    KEY_ENV,
    TOKEN_RE,
    DeidRecord,
    PseudonymKey,
    PseudonymKeyError,
    load_key,
    pseudonymize_id,
    pseudonymize_stream,
)
from cdrflow.records import CdrValidationError, RawCdrRecord, Tower, TowerRegistry

from support import EPOCH, KEY_BYTES, OTHER_KEY_BYTES, key


def test_token_construction():
    expected = hmac.new(KEY_BYTES, EPOCH.encode() + b"\x00" + b"923001234567", "sha256").digest()[:16].hex()
    assert pseudonymize_id("923001234567", key()) == expected


def test_deterministic():
    assert pseudonymize_id("A1", key()) == pseudonymize_id("A1", key())


def test_distinct_ids_distinct_tokens():
    assert pseudonymize_id("A1", key()) != pseudonymize_id("A2", key())


def test_key_and_epoch_change_token():
    assert pseudonymize_id("A1", key()) != pseudonymize_id("A1", key(OTHER_KEY_BYTES))
    assert pseudonymize_id("A1", key()) != pseudonymize_id("A1", key(epoch="other"))


@given(st.text(min_size=1, max_size=40))
def test_token_format_and_no_containment(raw):
    tok = pseudonymize_id(raw, key())
    assert TOKEN_RE.fullmatch(tok)
    assert raw not in tok


def test_short_hex_ids_never_embedded():
    # single hex characters occur in almost every raw token; the re-derivation must avoid them
    for raw in "0123456789abcdef":
        assert raw not in pseudonymize_id(raw, key())


def test_key_invariants():
    with pytest.raises(PseudonymKeyError):
        PseudonymKey(b"short", EPOCH)
    with pytest.raises(PseudonymKeyError):
        PseudonymKey(KEY_BYTES, "")


def test_key_repr_hides_material():
    assert KEY_BYTES.hex() not in repr(key())
    assert repr(KEY_BYTES) not in repr(key())


def test_load_key_from_env(tmp_path, monkeypatch):
    (tmp_path / "k").write_bytes(KEY_BYTES)
    monkeypatch.setenv(KEY_ENV, str(tmp_path / "k"))
    assert load_key(EPOCH) == key()


def test_load_key_missing(monkeypatch, tmp_path):
    monkeypatch.delenv(KEY_ENV, raising=False)
    with pytest.raises(PseudonymKeyError):
        load_key(EPOCH)
    with pytest.raises(PseudonymKeyError):
        load_key(EPOCH, tmp_path / "absent")


def test_missing_key_fails_before_input_is_read(tmp_path, monkeypatch):
    monkeypatch.delenv(KEY_ENV, raising=False)
    # the input is a directory: any attempt to read it would raise IsADirectoryError instead
    with pytest.raises(PseudonymKeyError):
        run_pseudonymize(tmp_path, tmp_path / "out" / "deid.csv", EPOCH)
    assert not (tmp_path / "out").exists()


def test_stream_empty():
    assert list(pseudonymize_stream([], key())) == []


def test_stream_preserves_order_and_fields():
    recs = [RawCdrRecord("S1", 30, "T2"), RawCdrRecord("S1", 10, "T1"), RawCdrRecord("S1", 20, "T3")]
    out = list(pseudonymize_stream(recs, key()))
    assert len({d.pseudonym for d in out}) == 1
    assert [(d.timestamp, d.tower_id) for d in out] == [(30, "T2"), (10, "T1"), (20, "T3")]
    assert all(isinstance(d, DeidRecord) for d in out)


def test_stream_1000_distinct():
    recs = [RawCdrRecord(f"923{i:09d}", i, "T1") for i in range(1000)]
    assert len({d.pseudonym for d in pseudonymize_stream(recs, key())}) == 1000


def test_stream_validation_error_has_offset():
    reg = TowerRegistry({"T1": Tower(0, 0, "R")})
    recs = [RawCdrRecord("S1", 1, "T1"), RawCdrRecord("S2", 1, "TX")]
    with pytest.raises(CdrValidationError, match="offset 1"):
        list(pseudonymize_stream(recs, key(), reg))


def test_file_stage_quarantines_and_never_writes_raw(tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text("923000000001,100,T1\n923000000002,bad,T1\n923000000003,200,TX\n923000000001,0300,T1\n")
    reg = tmp_path / "towers.csv"
    reg.write_text("tower_id,lat,lon,region_id\nT1,30,70,R0\n")
    (tmp_path / "k").write_bytes(KEY_BYTES)
    man = run_pseudonymize(raw, tmp_path / "z1" / "deid.csv", EPOCH, tmp_path / "k", reg)
    deid = (tmp_path / "z1" / "deid.csv").read_text()
    assert man["rejected"] == 2 and man["records_in"] == 4
    lines = deid.splitlines()
    assert [ln.split(",")[1] for ln in lines] == ["100", "300"]
    for f in (tmp_path / "z1").iterdir():
        assert "92300000000" not in f.read_text()
    rejects = (tmp_path / "raw.csv.rejects.csv").read_text().splitlines()
    assert [r.split(",")[1] for r in rejects[1:]] == ["BAD_TIMESTAMP", "UNKNOWN_TOWER"]
