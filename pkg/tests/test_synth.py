import csv
from collections import defaultdict

import pytest

from cdrflow.aggregate import assign_daily_location
from cdrflow.records import day_of
from cdrflow.synth import (
    TRUTH_HEADER,
    GeneratorConfig,
    generate,
    load_generator_config,
    synth_registry,
    tower_ids,
    write_synthetic,
)


def _truth_from_records(config):
    records, _ = generate(config)
    by_key = defaultdict(list)
    for r in records:
        by_key[(r.subscriber_id, day_of(r.timestamp))].append((r.timestamp, r.tower_id))
    return {(s, d): (assign_daily_location(s, d, ev).tower_id, len(ev)) for (s, d), ev in by_key.items()}


def test_single_tower_world():
    cfg = GeneratorConfig(1, 1, 1, mean_events_per_day=1, p_travel=0, p_silent=0, shuffle_window=0, seed=42)
    records, truth = generate(cfg)
    records, truth = list(records), list(truth)
    assert len(records) >= 1
    assert {r.tower_id for r in records} == {tower_ids(1)[0]}
    assert {day_of(r.timestamp) for r in records} == {0}
    assert len(truth) == 1


def test_byte_identical_reruns(tmp_path):
    cfg = GeneratorConfig(30, 5, 4, shuffle_window=7, seed=9)
    write_synthetic(cfg, tmp_path / "a.csv", tmp_path / "a.truth")
    write_synthetic(cfg, tmp_path / "b.csv", tmp_path / "b.truth")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.truth").read_bytes() == (tmp_path / "b.truth").read_bytes()


def test_seed_changes_output(tmp_path):
    write_synthetic(GeneratorConfig(30, 5, 4, seed=1), tmp_path / "a.csv")
    write_synthetic(GeneratorConfig(30, 5, 4, seed=2), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "b.csv").read_bytes()


def test_file_matches_stream(tmp_path):
    cfg = GeneratorConfig(20, 4, 3, shuffle_window=3, seed=5)
    write_synthetic(cfg, tmp_path / "cdr.csv", tmp_path / "truth.csv")
    records, truth = generate(cfg)
    assert (tmp_path / "cdr.csv").read_text().splitlines() == [r.to_line() for r in records]
    lines = (tmp_path / "truth.csv").read_text().splitlines()
    assert lines[0] == TRUTH_HEADER
    assert lines[1:] == [f"{s},{d},{t},{n}" for s, d, t, n in truth]


def test_no_travel_means_home_only():
    records, _ = generate(GeneratorConfig(25, 8, 5, p_travel=0, seed=11))
    towers = defaultdict(set)
    for r in records:
        towers[r.subscriber_id].add(r.tower_id)
    assert all(len(t) == 1 for t in towers.values())


@pytest.mark.parametrize("seed", range(5))
def test_truth_is_modal_tower(seed):
    cfg = GeneratorConfig(40, 7, 6, mean_events_per_day=3, p_travel=0.5, p_silent=0.3,
                          shuffle_window=4, seed=seed)
    _, truth = generate(cfg)
    expected = {(s, d): (t, n) for s, d, t, n in truth}
    assert _truth_from_records(cfg) == expected


def test_silent_days_absent_everywhere():
    cfg = GeneratorConfig(50, 4, 5, p_silent=0.5, seed=3)
    records, truth = generate(cfg)
    active = {(r.subscriber_id, day_of(r.timestamp)) for r in records}
    truth_keys = {(s, d) for s, d, _, _ in truth}
    assert active == truth_keys
    assert len(active) < 50 * 5
    assert all(n >= 1 for _, _, _, n in generate(cfg)[1])


def test_all_silent():
    records, truth = generate(GeneratorConfig(5, 3, 2, p_silent=1.0))
    assert list(records) == [] and list(truth) == []


def test_shuffle_window_only_permutes_locally():
    base = GeneratorConfig(30, 4, 2, shuffle_window=0, seed=8)
    shuf = GeneratorConfig(30, 4, 2, shuffle_window=6, seed=8)
    a = [r.to_line() for r in generate(base)[0]]
    b = [r.to_line() for r in generate(shuf)[0]]
    assert sorted(a) == sorted(b)
    assert a != b


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(0, 1, 1)
    with pytest.raises(ValueError):
        GeneratorConfig(1, 1, 1, p_travel=1.5)
    with pytest.raises(ValueError):
        GeneratorConfig(1, 1, 1, shuffle_window=-1)
    with pytest.raises(ValueError):
        GeneratorConfig(1, 1, 1, mean_events_per_day=0)


def test_load_config(tmp_path):
    (tmp_path / "g.cfg").write_text("n_subscribers = 3\nn_towers = 2\nn_days = 4\np_travel = 0.5\nseed = 7\n")
    assert load_generator_config(tmp_path / "g.cfg") == GeneratorConfig(3, 2, 4, p_travel=0.5, seed=7)


def test_registry_covers_towers_in_region_blocks():
    cfg = GeneratorConfig(1, 10, 1, n_regions=3)
    reg = synth_registry(cfg)
    assert sorted(reg) == tower_ids(10)
    regions = [reg.region_of(t) for t in tower_ids(10)]
    assert regions == sorted(regions) and len(set(regions)) == 3


def test_subscriber_ids_are_phone_like(tmp_path):
    write_synthetic(GeneratorConfig(3, 2, 1, p_silent=0), tmp_path / "cdr.csv")
    ids = {row[0] for row in csv.reader(open(tmp_path / "cdr.csv"))}
    assert all(len(s) == 12 and s.startswith("923") for s in ids)
