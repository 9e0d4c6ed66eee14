"""The oracle is checked against hand-computed cases and the generator's ground truth.

Everything else is then checked against the oracle.
"""
import random
from collections import Counter

from cdrflow.matrix import EVENT
from cdrflow.oracle import oracle_presence, oracle_region_presence, oracle_region_rollup, oracle_transitions
from cdrflow.pseudonym import DeidRecord
from cdrflow.records import Tower, TowerRegistry
from cdrflow.rollup import spatial_rollup
from cdrflow.synth import GeneratorConfig, generate

from support import deid_records, key, registry_for

D = 86400
P = "p" * 32


def r(ts, tower, p=P):
    return DeidRecord(p, ts, tower)


def test_single_record():
    assert oracle_presence([r(D + 5, "T1")]).counts == {(1, "T1"): 1}


def test_tie_chain():
    assert oracle_presence([r(1, "A"), r(2, "A"), r(3, "B")]).counts == {(0, "A"): 1}
    assert oracle_presence([r(10, "B"), r(20, "A")]).counts == {(0, "B"): 1}
    assert oracle_presence([r(10, "B"), r(10, "A")]).counts == {(0, "A"): 1}


def test_two_days_two_towers():
    assert oracle_transitions([r(5, "A"), r(D + 5, "B")]).counts == {(0, "A", "B"): 1}


def test_gap_rule():
    recs = [r(5, "A"), r(2 * D + 5, "B")]
    assert oracle_transitions(recs, bridge_gap=0).counts == {}
    assert oracle_transitions(recs, bridge_gap=1).counts == {(0, "A", "B"): 1}


def test_event_mode():
    recs = [r(1, "A"), r(2, "B"), r(3, "B"), r(4, "A"), r(D + 1, "C")]
    assert oracle_transitions(recs, EVENT).counts == {(0, "A", "B"): 1, (0, "B", "A"): 1}


def test_permutation_independent():
    recs = deid_records(GeneratorConfig(20, 5, 5, seed=4))
    shuffled = recs[:]
    random.Random(0).shuffle(shuffled)
    assert oracle_transitions(recs).counts == oracle_transitions(shuffled).counts
    assert oracle_presence(recs).counts == oracle_presence(shuffled).counts


def test_matches_ground_truth():
    cfg = GeneratorConfig(50, 10, 14, p_travel=0.4, p_silent=0.2, shuffle_window=9, seed=21)
    _, truth = generate(cfg)
    expected = Counter((d, t) for _, d, t, _ in truth)
    assert oracle_presence(deid_records(cfg, key())).counts == dict(expected)


def test_single_region_one_cell_per_window():
    reg = TowerRegistry({t: Tower(0, 0, "ALL") for t in ("A", "B", "C")})
    recs = [r(d * D + 1, t, p) for d in range(10) for t, p in (("A", P), ("C", "q" * 32))]
    m = oracle_region_rollup(recs, reg, 7)
    assert m.counts == {(0, "ALL", "ALL"): 14, (7, "ALL", "ALL"): 4}
    assert m.partial_windows == (7,)


def test_identity_window_equals_spatial_rollup_of_oracle():
    cfg = GeneratorConfig(30, 6, 6, seed=2, n_regions=3)
    recs, reg = deid_records(cfg), registry_for(cfg)
    assert oracle_region_rollup(recs, reg, 1).counts == spatial_rollup(oracle_transitions(recs), reg).counts
    assert oracle_region_presence(recs, reg, 1).counts == spatial_rollup(oracle_presence(recs), reg).counts
