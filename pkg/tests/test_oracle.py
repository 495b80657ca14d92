import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import rec
from malstone import malgen
from malstone.model import SpmScore, Window
from malstone.oracle import (
    exposed_entities,
    oracle_entity_counts_series,
    oracle_entity_spm,
    oracle_entity_spm_series,
    write_oracle_csv,
    write_oracle_series_csv,
)

T0 = dt.datetime(2009, 1, 1)


def day(n, h=0):
    return T0 + dt.timedelta(days=n, hours=h)


def test_small_example():
    # e1 visits site 1 and is marked a week later; e2 visits and is never marked;
    # e3 is marked first and visits afterwards, so it is not exposed.
    rs = [rec(1, day(0), entity=1), rec(1, day(1), entity=2), rec(1, day(3), True, entity=3),
          rec(2, day(2), entity=2)]
    marks = {1: day(7), 3: day(2)}
    exp, mon = Window(day(0), day(5)), Window(day(0), day(30))
    assert oracle_entity_spm(rs, marks, exp, mon) == {1: SpmScore(1, 2, 1, 0.5), 2: SpmScore(2, 1, 0, 0.0)}
    # Mark after the monitor window: not in B.
    assert oracle_entity_spm(rs, marks, exp, Window(day(0), day(6)))[1] == SpmScore(1, 2, 0, 0.0)


def test_repeat_visits_count_once():
    rs = [rec(5, day(i), entity=9) for i in range(4)]
    assert oracle_entity_spm(rs, {9: day(10)}, Window(day(0), day(9)), Window(day(0), day(20))) == {
        5: SpmScore(5, 1, 1, 1.0)}


def test_visit_at_mark_instant_is_not_exposure():
    rs = [rec(1, day(2), entity=1), rec(2, day(1), entity=1)]
    exposed, _ = exposed_entities(rs, {1: day(2)}, Window(day(0), day(9)))
    assert exposed == {2: {1}}


def test_windows_are_closed():
    rs = [rec(1, day(0), entity=1), rec(1, day(5), entity=2), rec(1, day(6), entity=3)]
    marks = {1: day(9), 2: day(9, 1)}
    got = oracle_entity_spm(rs, marks, Window(day(0), day(5)), Window(day(5), day(9)))
    assert got == {1: SpmScore(1, 2, 1, 0.5)}


def test_series_nested_windows():
    rs = [rec(1, day(0), entity=e) for e in range(4)]
    marks = {0: day(3), 1: day(10), 2: day(20)}
    ends = [day(5), day(15), day(25)]
    series = oracle_entity_spm_series(rs, marks, Window(day(0), day(1)), ends)
    assert series == {1: [(day(5), 0.25), (day(15), 0.5), (day(25), 0.75)]}
    late = oracle_entity_counts_series(rs, marks, Window(day(0), day(1)), ends, monitor_start=day(8))
    assert late == {1: [(day(5), 4, 0), (day(15), 4, 1), (day(25), 4, 2)]}
    with pytest.raises(ValueError):
        oracle_entity_spm_series(rs, marks, Window(day(0), day(1)), [day(5), day(5)])


def test_csv_writers(tmp_path):
    write_oracle_csv(tmp_path / "a.csv", {2: SpmScore(2, 3, 1, 1 / 3), 1: SpmScore(1, 2, 1, 0.5)})
    assert (tmp_path / "a.csv").read_text() == "site_id,a_size,b_size,rho\n1,2,1,0.500000\n2,3,1,0.333333\n"
    write_oracle_series_csv(tmp_path / "b.csv", {1: [(day(5), 4, 1)]})
    assert (tmp_path / "b.csv").read_text() == (
        "site_id,monitor_end,a_size,b_size,rho\n1,2009-01-06 00:00:00,4,1,0.250000\n")


def brute_force(rs, marks, exp, mon, n_sites, n_entities):
    """Quadratic check over every (site, entity) pair, straight from the definition."""
    a = np.zeros(n_sites, dtype=np.int64)
    b = np.zeros(n_sites, dtype=np.int64)
    for j in range(n_sites):
        for e in range(n_entities):
            mark = marks.get(e)
            exposed = any(r.site_id == j and r.entity_id == e and exp.start <= r.timestamp <= exp.end
                          and (mark is None or r.timestamp < mark) for r in rs)
            if exposed:
                a[j] += 1
                b[j] += mark is not None and mon.start <= mark <= mon.end
    return {j: (int(a[j]), int(b[j])) for j in range(n_sites) if a[j]}


def random_log(seed, n, n_sites, n_entities, marked_frac=0.4):
    rng = np.random.default_rng(seed)
    span = 60 * 86400
    rs = [rec(int(s), T0 + dt.timedelta(seconds=int(t)), False, int(e))
          for s, e, t in zip(rng.integers(0, n_sites, n), rng.integers(0, n_entities, n), rng.integers(0, span, n))]
    marked = rng.random(n_entities) < marked_frac
    marks = {e: T0 + dt.timedelta(seconds=int(rng.integers(0, span))) for e in np.flatnonzero(marked).tolist()}
    return rs, marks


def random_windows(rng):
    a, b = sorted(rng.integers(0, 60, 2).tolist())
    c = int(rng.integers(0, 60))
    return Window(day(a), day(b, 12)), Window(day(c), day(70))


def test_oracle_matches_brute_force_small():
    rs, marks = random_log(3, 600, 6, 40)
    rng = np.random.default_rng(4)
    for _ in range(5):
        exp, mon = random_windows(rng)
        got = {s: (v.events, v.marked) for s, v in oracle_entity_spm(rs, marks, exp, mon).items()}
        assert got == brute_force(rs, marks, exp, mon, 6, 40)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_series_nondecreasing_and_ends_at_fixed_window(seed):
    rs, marks = random_log(seed, 200, 5, 30)
    rng = np.random.default_rng(seed)
    exp, _ = random_windows(rng)
    ends = sorted({exp.start + dt.timedelta(days=int(d)) for d in rng.integers(0, 80, 6)})
    series = oracle_entity_spm_series(rs, marks, exp, ends)
    fixed = oracle_entity_spm(rs, marks, exp, Window(exp.start, ends[-1]))
    assert set(series) == set(fixed)
    for site, pts in series.items():
        rhos = [r for _, r in pts]
        assert rhos == sorted(rhos)
        assert pts[-1][1] == fixed[site].rho


def test_reads_dataset_and_mark_table(small_dataset):
    root, cfg = small_dataset
    seed = malgen.load_seed(root)
    start = dt.datetime.combine(cfg.period_start, dt.time())
    exp = Window(start, start + dt.timedelta(days=90))
    mon = Window(start, start + dt.timedelta(days=400))
    scores = oracle_entity_spm(root, seed.mark_table, exp, mon)
    assert scores
    assert all(0 <= s.marked <= s.events for s in scores.values())
    # Marked sites seed the marks, so some must carry a positive score.
    assert any(s.rho > 0 for site, s in scores.items() if site < cfg.marked_sites)
