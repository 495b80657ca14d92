import datetime as dt
import hashlib
import itertools
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import small_config
from malstone import codec, isoweek, malgen
from malstone.malgen import (
    ConfigInfeasible,
    MarkTable,
    SeedPackage,
    Stream,
    fnv1a_64,
    mark_time_update,
    node_hash,
    sample_event_count,
)

DAY = 86400


# Published FNV-1a 64-bit test vectors (from the FNV reference test suite).
@pytest.mark.parametrize("data, expected", [
    (b"", 0xCBF29CE484222325),
    (b"a", 0xAF63DC4C8601EC8C),
    (b"foobar", 0x85944171F73967E8),
])
def test_fnv1a_vectors(data, expected):
    assert fnv1a_64(data) == expected


def fnv1a_reference(data: bytes) -> int:
    # Written from the algorithm description, independent of malgen.fnv1a_64.
    h = 14695981039346656037
    for byte in data:
        h = ((h ^ byte) * 1099511628211) % 2**64
    return h


@given(st.binary(max_size=64))
def test_fnv1a_matches_reference(data):
    assert fnv1a_64(data) == fnv1a_reference(data)


def test_node_hash():
    assert node_hash("node-0000") == node_hash("node-0000")
    assert node_hash("node-0000") != node_hash("node-0001")
    assert node_hash("node-0000") == f"{fnv1a_reference(b'node-0000') & 0xFFFFFFFFFFFF:012x}"
    assert f"{fnv1a_64(b'') & 0xFFFFFFFFFFFF:012x}" == "9ce484222325"
    hashes = {node_hash(malgen.node_name(k)) for k in range(1000)}
    assert len(hashes) == 1000
    assert all(len(h) == 12 and h == h.lower() for h in hashes)


def test_node_seeds_distinct():
    seeds = [malgen.node_seed(42, k) for k in range(1000)]
    assert len(set(seeds)) == 1000
    assert seeds[7] == fnv1a_reference((42).to_bytes(8, "little") + (7).to_bytes(8, "little"))


@pytest.mark.parametrize("u, expected", [(0.0, 50), (0.75, 100), (0.9375, 200), (1 - 1e-12, 10**7)])
def test_sample_event_count_examples(u, expected):
    assert sample_event_count(u, 2.0, 50, 10**7) == expected


def test_sample_event_count_clamps():
    assert sample_event_count(0.999999, 2.0, 50, 60) == 60
    assert sample_event_count(0.5, 1.5, 1, 10) == 1  # floor(2**(2/3)) = 1
    assert list(sample_event_count(np.array([0.0, 0.75]), 2.0, 50, 10**7)) == [50, 100]


def hill(samples, k):
    x = np.sort(np.asarray(samples, dtype=np.float64))[::-1]
    return 1.0 / np.mean(np.log(x[:k] / x[k]))


def test_power_law_tail_index():
    counts = sample_event_count(Stream.seeded(5).uniform(100_000), 2.0, 50, 10**7)
    assert 1.7 <= hill(counts, 2000) <= 2.3


def test_stream_is_chunk_independent():
    a = Stream.seeded(99)
    whole = a.uniform(1000)
    b = Stream.seeded(99)
    parts = np.concatenate([b.uniform(1), b.uniform(333), b.uniform(666)])
    assert (whole == parts).all()
    assert (whole >= 0).all() and (whole < 1).all()
    assert Stream.seeded(99, 1).uniform(5).tolist() != Stream.seeded(99).uniform(5).tolist()


def test_mark_time_update_examples():
    assert mark_time_update(None, 10, True, 7) == 17
    assert mark_time_update(17, 5, True, 7) == 12
    assert mark_time_update(12, 20, True, 7) == 12
    assert mark_time_update(12, 1, False, 7) == 12
    assert mark_time_update(None, 1, False, 7) is None
    t = dt.datetime(2009, 1, 10)
    assert mark_time_update(None, t, True, dt.timedelta(days=7)) == dt.datetime(2009, 1, 17)


visits = st.lists(st.tuples(st.integers(0, 10**6), st.booleans()), max_size=20)


@given(visits, st.integers(0, 10**5), st.randoms())
def test_mark_time_fold_is_order_independent(vs, delay, rnd):
    def fold(seq):
        cur = None
        for t, ok in seq:
            cur = mark_time_update(cur, t, ok, delay)
        return cur

    shuffled = list(vs)
    rnd.shuffle(shuffled)
    wins = [t + delay for t, ok in vs if ok]
    expected = min(wins) if wins else None
    assert fold(vs) == fold(shuffled) == expected


def test_mark_table_lookup():
    mt = MarkTable([5, 1, 9], [50, 10, 90])
    assert list(mt.entities) == [1, 5, 9]
    assert 5 in mt and 4 not in mt
    assert mt.get_epoch(9) == 90 and mt.get_epoch(2) is None
    assert mt.lookup(np.array([0, 1, 5, 10], np.uint64)).tolist() == [malgen.NEVER, 10, 50, malgen.NEVER]
    assert mt.flags(np.array([1, 1, 2], np.uint64), np.array([9, 10, 10])).tolist() == [False, True, False]
    assert MarkTable().lookup(np.array([1], np.uint64)).tolist() == [malgen.NEVER]
    with pytest.raises(ValueError):
        MarkTable([1, 1], [2, 3])


def test_mark_table_tsv_roundtrip(tmp_path):
    mt = MarkTable([30, 4], [isoweek.to_epoch(dt.datetime(2009, 3, 1, 12, 0, 5)), 0])
    mt.to_tsv(tmp_path / "m.tsv")
    assert (tmp_path / "m.tsv").read_text() == "4\t1970-01-01 00:00:00\n30\t2009-03-01 12:00:05\n"
    back = MarkTable.from_tsv(tmp_path / "m.tsv")
    assert back.entities.tolist() == [4, 30] and back.times.tolist() == mt.times.tolist()


# --- coordinator phase ---------------------------------------------------------

def test_marked_phase_vacuous():
    marked, table = malgen.generate_marked_phase(small_config(marked_sites=0))
    assert len(marked) == 0 and len(table) == 0


def test_marked_phase_single_visitor_forced_mark():
    cfg = small_config(marked_sites=1, entities=1, events_min=1, events_max=1, p_mark=1.0, delay_days=0)
    marked, table = malgen.generate_marked_phase(cfg)
    assert len(marked) == 1 and len(table) == 1
    assert table.get_epoch(0) == int(marked.epoch[0])
    assert bool(marked.flag[0])  # marked at its own visit instant
    later = np.array([marked.epoch[0] + 1])
    assert table.flags(np.array([0], np.uint64), later).tolist() == [True]


def test_marked_phase_rejects_demand_over_budget():
    cfg = small_config(nodes=1, records_per_node=100, marked_sites=5, events_min=50)
    with pytest.raises(ConfigInfeasible):
        malgen.generate_marked_phase(cfg)


def test_marked_phase_events_within_site_activity():
    cfg = small_config(marked_sites=20)
    marked, table = malgen.generate_marked_phase(cfg)
    assert (marked.epoch >= cfg.period_start_epoch).all() and (marked.epoch < cfg.period_end_epoch).all()
    assert set(np.unique(marked.site).tolist()) == set(range(20))
    assert (table.times >= cfg.period_start_epoch).all()
    assert (table.times < cfg.period_end_epoch + cfg.delay_seconds).all()
    # Each marked entity's mark is exactly delay after some visit of it.
    for e, t in zip(table.entities[:200], table.times[:200]):
        visits = marked.epoch[marked.entity == e]
        assert (visits + cfg.delay_seconds == t).any()
        assert (visits < t).any()


def test_mark_probability_binomial():
    # Entity pool so large that every visit is a fresh entity.
    cfg = small_config(nodes=1, records_per_node=10**6, marked_sites=150, entities=10**12, p_mark=0.7)
    marked, table = malgen.generate_marked_phase(cfg)
    visitors = np.unique(marked.entity)
    assert len(visitors) >= 10_000
    frac = len(table) / len(visitors)
    assert abs(frac - 0.7) <= 0.02


def test_background_marks():
    cfg = small_config(background_mark_rate=0.25, entities=20_000)
    marked, table = malgen.generate_marked_phase(cfg)
    assert len(table) > 0.25 * 20_000 * 0.9
    assert (table.times >= cfg.period_start_epoch).all()
    assert (table.times < cfg.period_end_epoch + cfg.delay_seconds).all()


# --- scatter ---------------------------------------------------------------

def test_round_robin_allocation():
    cfg = small_config(nodes=4)
    marked = malgen.MarkedEvents(np.full(10, cfg.period_start_epoch), np.zeros(10, np.uint64),
                                 np.arange(10, dtype=np.uint64), np.zeros(10, bool))
    seed = malgen.build_and_scatter_seed(cfg, marked, MarkTable(), None)
    assert [len(a) for a in seed.allocations] == [3, 3, 2, 2]
    node1 = list(seed.allocation_records(1))
    assert [r.entity_id for r in node1] == [1, 5, 9]
    assert [r.event_seq for r in node1] == [0, 1, 2]
    assert {r.event_node for r in node1} == {node_hash("node-0001")}


def test_site_ranges_disjoint_and_cover_unmarked():
    ranges = malgen.split_site_ranges(20, 2000, 7)
    assert ranges[0][0] == 20 and ranges[-1][1] == 2000
    for (a, b), (c, d) in zip(ranges, ranges[1:]):
        assert b == c and a <= b
    assert max(b - a for a, b in ranges) - min(b - a for a, b in ranges) <= 1


def tree_digest(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_seed_directory_deterministic(tmp_path):
    cfg = small_config()
    for name in ("a", "b"):
        marked, table = malgen.generate_marked_phase(cfg)
        malgen.build_and_scatter_seed(cfg, marked, table, tmp_path / name)
    a, b = tree_digest(tmp_path / "a" / "seed"), tree_digest(tmp_path / "b" / "seed")
    assert a == b
    assert {"marks.tsv", "package.json", "allocations/node-0000.dat"} <= set(a)


def test_seed_roundtrip(tmp_path):
    cfg = small_config()
    marked, table = malgen.generate_marked_phase(cfg)
    seed = malgen.build_and_scatter_seed(cfg, marked, table, tmp_path)
    back = malgen.load_seed(tmp_path)
    assert back.config == cfg
    assert back.node_seeds == seed.node_seeds and back.site_ranges == seed.site_ranges
    assert back.mark_table.entities.tolist() == table.entities.tolist()
    assert all((x == y).all() for x, y in zip(back.allocations, seed.allocations))


# --- local generation --------------------------------------------------------

def test_partition_quota(tmp_path):
    cfg = small_config(nodes=2, records_per_node=1000, marked_sites=2)
    summary = malgen.generate_dataset(cfg, tmp_path)
    assert summary["records"] == 2000
    for k in range(2):
        path = tmp_path / f"node-{k:04d}" / "part-0000.dat"
        assert os.path.getsize(path) == 100_000
        recs = list(codec.scan_partition(codec.PartitionRef(k, 0, path)))
        assert [r.event_seq for r in recs] == list(range(1000))
        assert {r.event_node for r in recs} == {node_hash(f"node-{k:04d}")}


def test_node_order_and_chunking_do_not_matter(tmp_path):
    cfg = small_config()
    marked, table = malgen.generate_marked_phase(cfg)
    seed = malgen.build_and_scatter_seed(cfg, marked, table, None)
    for k in range(cfg.nodes):
        malgen.generate_node_partition(k, seed, tmp_path / "serial")
    for k in reversed(range(cfg.nodes)):
        malgen.generate_node_partition(k, seed, tmp_path / "reversed", chunk_records=333)
    assert tree_digest(tmp_path / "serial") == tree_digest(tmp_path / "reversed")


def test_parallel_generation_matches_serial(tmp_path):
    cfg = small_config(nodes=4)
    malgen.generate_dataset(cfg, tmp_path / "w1", workers=1)
    malgen.generate_dataset(cfg, tmp_path / "w3", workers=3)
    assert tree_digest(tmp_path / "w1") == tree_digest(tmp_path / "w3")


def test_different_seed_different_data(tmp_path):
    malgen.generate_dataset(small_config(master_seed=1), tmp_path / "a")
    malgen.generate_dataset(small_config(master_seed=2), tmp_path / "b")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "b")


def load_all(root):
    ds = codec.Dataset.open(root)
    return list(ds.records()), malgen.load_seed(root)


def test_generated_invariants(small_dataset):
    root, cfg = small_dataset
    recs, seed = load_all(root)
    marks = seed.mark_table
    assert len(recs) == cfg.total_records
    assert len({(r.event_node, r.event_seq) for r in recs}) == len(recs)
    lo = isoweek.from_epoch(cfg.period_start_epoch)
    hi = isoweek.from_epoch(cfg.period_end_epoch)
    by_entity = {}
    for r in recs:
        assert lo <= r.timestamp < hi
        m = marks.get(r.entity_id)
        assert r.mark_flag == (m is not None and m <= r.timestamp)
        by_entity.setdefault(r.entity_id, []).append((r.timestamp, r.mark_flag))
    for seq in by_entity.values():
        flags = [f for _, f in sorted(seq)]
        assert flags == sorted(flags)  # 0*1*
    node_sites = {}
    for r in recs:
        if r.site_id >= cfg.marked_sites:
            node_sites.setdefault(r.event_node, set()).add(r.site_id)
    for k, (a, b) in enumerate(seed.site_ranges):
        assert node_sites[node_hash(f"node-{k:04d}")] <= set(range(a, b))


def test_marked_entities_visit_marked_sites_before_mark(small_dataset):
    root, cfg = small_dataset
    recs, seed = load_all(root)
    delay = dt.timedelta(days=cfg.delay_days)
    visits = {}
    for r in recs:
        if r.site_id < cfg.marked_sites:
            visits.setdefault(r.entity_id, []).append(r.timestamp)
    for e, t in seed.mark_table.as_dict().items():
        vs = visits[e]
        assert any(v < t for v in vs)
        assert any(v + delay == t for v in vs)


def test_marked_entities_flagged_on_unmarked_sites(small_dataset):
    root, cfg = small_dataset
    recs, seed = load_all(root)
    marks = seed.mark_table.as_dict()
    hits = [r for r in recs if r.site_id >= cfg.marked_sites and r.entity_id in marks
            and r.timestamp >= marks[r.entity_id]]
    assert hits and all(r.mark_flag for r in hits)


def test_marked_entity_flag_on_unmarked_site(tmp_path):
    # Entity 0 is marked on day 12; with a one-entity pool every unmarked-site
    # event belongs to it, so the flag must switch on exactly at day 12.
    cfg = small_config(nodes=1, records_per_node=2000, marked_sites=0, entities=1, total_sites=100)
    start = cfg.period_start_epoch
    seed = SeedPackage(cfg, MarkTable([0], [start + 12 * DAY]), [np.empty((0, 100), np.uint8)],
                       [123], [(0, 100)], [node_hash("node-0000")])
    ref, n = malgen.generate_node_partition(0, seed, tmp_path)
    recs = list(codec.scan_partition(ref))
    assert n == 2000
    mark = isoweek.from_epoch(start + 12 * DAY)
    assert all(r.mark_flag == (r.timestamp >= mark) for r in recs)
    assert any(r.mark_flag and r.timestamp >= isoweek.from_epoch(start + 30 * DAY) for r in recs)


def test_site_range_exhaustion(tmp_path):
    cfg = small_config(nodes=2, records_per_node=10_000, total_sites=30, marked_sites=0)
    with pytest.raises(ConfigInfeasible, match="total_sites"):
        malgen.generate_dataset(cfg, tmp_path)


def test_invalid_config_rejected(tmp_path):
    with pytest.raises(ValueError, match="p_mark"):
        malgen.generate_dataset(small_config(p_mark=2.0), tmp_path)


def test_manifest_matches_files(small_dataset):
    root, cfg = small_dataset
    ds = codec.Dataset.open(root)
    assert ds.manifest["total_records"] == cfg.total_records == ds.record_count()
    for e in ds.manifest["partitions"]:
        assert os.path.getsize(root / e["path"]) == e["records"] * 100
        assert codec.file_checksum(root / e["path"]) == e["checksum"]
