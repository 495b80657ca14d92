"""MalStone A and B over a dataset, with three interchangeable engines.

* ``mapreduce``: input splits are scanned and mapped in parallel, map output
  is combined into per-(site, week) counters and shuffled in memory to
  ``site_id % R`` reducers, and reducers run in parallel.
* ``bucketed``: stage 1 appends every raw record to one of ``R`` bucket files
  on disk by ``site_id % R``; stage 2 aggregates each bucket file on its own.
* ``reference``: one single-threaded pass in pure Python with dict
  accumulators. It shares no parsing or grouping code with the other two
  and serves as their oracle.

All engines count events (not distinct entities) per ISO week; results are
sorted by site id, so output bytes never depend on scheduling.
"""
from __future__ import annotations

import os
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from malstone import codec, isoweek
from malstone.codec import RECORD_SIZE, Dataset
from malstone.model import (
    EventRecord,
    SeriesEntry,
    SpmScore,
    SpmSeries,
    WeekBucket,
    iso_week_bucket,
)

ENGINES = ("mapreduce", "bucketed", "reference")
SPLIT_RECORDS = 1 << 20
CHUNK_RECORDS = 1 << 13  # parse unit; small enough to stay cache-resident

A_HEADER = "site_id,events,marked,rho"
B_HEADER = "site_id,iso_year,iso_week,cum_events,cum_marked,rho"


class MappedPair(NamedTuple):
    key: int
    value: tuple[WeekBucket, bool]


def map_record(r: EventRecord) -> MappedPair:
    return MappedPair(r.site_id, (iso_week_bucket(r.timestamp), r.mark_flag))


def partition_for_site(site_id: int, reducers: int) -> int:
    if reducers < 1:
        raise ValueError("reducer count must be at least 1")
    return site_id % reducers


def _series_from_counts(site_id: int, per_bucket: dict) -> SpmSeries:
    entries = []
    events = marked = 0
    for bucket in sorted(per_bucket):
        e, m = per_bucket[bucket]
        events += e
        marked += m
        entries.append(SeriesEntry(bucket, events, marked, marked / events))
    return SpmSeries(site_id, tuple(entries))


def reduce_site(site_id: int, pairs: Iterable[tuple[WeekBucket, bool]]) -> SpmSeries:
    counts: dict[WeekBucket, list[int]] = {}
    for bucket, flag in pairs:
        c = counts.setdefault(bucket, [0, 0])
        c[0] += 1
        c[1] += bool(flag)
    if not counts:
        raise ValueError(f"site {site_id}: reduce_site needs at least one pair")
    return _series_from_counts(site_id, counts)


# --- results ----------------------------------------------------------------

@dataclass
class EngineResult:
    """Columnar per-site output of one benchmark run.

    MalStone A columns: ``site, events, marked``. MalStone B columns:
    ``site, iso_year, iso_week, cum_events, cum_marked`` with one row per
    (site, week) that had events. Rows are sorted by site, then week.
    """

    benchmark: str
    engine: str
    columns: dict[str, np.ndarray]
    timing: dict[str, float] = field(default_factory=dict)

    def __len__(self):
        return len(self.columns["site"])

    @property
    def sites(self) -> np.ndarray:
        return np.unique(self.columns["site"])

    def scores(self) -> dict[int, SpmScore]:
        if self.benchmark != "A":
            raise ValueError("scores() is only defined for MalStone A results")
        c = self.columns
        return {
            s: SpmScore(s, e, m, m / e)
            for s, e, m in zip(c["site"].tolist(), c["events"].tolist(), c["marked"].tolist())
        }

    def series(self) -> dict[int, SpmSeries]:
        if self.benchmark != "B":
            raise ValueError("series() is only defined for MalStone B results")
        c = self.columns
        out: dict[int, list] = {}
        for s, y, w, e, m in zip(c["site"].tolist(), c["iso_year"].tolist(), c["iso_week"].tolist(),
                                 c["cum_events"].tolist(), c["cum_marked"].tolist()):
            out.setdefault(s, []).append(SeriesEntry(WeekBucket(y, w), e, m, m / e))
        return {s: SpmSeries(s, tuple(v)) for s, v in out.items()}

    def terminal(self) -> "EngineResult":
        """MalStone A view of a B result: the last cumulative row per site."""
        if self.benchmark != "B":
            raise ValueError("terminal() needs a MalStone B result")
        s = self.columns["site"]
        last = np.ones(len(s), dtype=bool)
        last[:-1] = s[1:] != s[:-1]
        return EngineResult("A", self.engine, {
            "site": s[last],
            "events": self.columns["cum_events"][last],
            "marked": self.columns["cum_marked"][last],
        })

    def violations(self) -> list[str]:
        """SpmSeries/SpmScore invariant violations over the whole output."""
        c = self.columns
        s = c["site"]
        out = []
        if len(s) > 1 and (s[1:] < s[:-1]).any():
            out.append("rows not sorted by site")
        if self.benchmark == "A":
            e, m = c["events"], c["marked"]
            if len(s) > 1 and (s[1:] == s[:-1]).any():
                out.append("duplicate site rows")
            bad = np.flatnonzero((e < 1) | (m < 0) | (m > e))
            if len(bad):
                out.append(f"site {s[bad[0]]}: counts out of range")
            return out
        e, m = c["cum_events"], c["cum_marked"]
        week_key = c["iso_year"].astype(np.int64) * 100 + c["iso_week"]
        same = s[1:] == s[:-1]
        bad = np.flatnonzero(same & ((week_key[1:] <= week_key[:-1]) | (e[1:] <= e[:-1]) | (m[1:] < m[:-1])))
        if len(bad):
            out.append(f"site {s[bad[0] + 1]}: series not strictly increasing at row {bad[0] + 1}")
        bad = np.flatnonzero((e < 1) | (m < 0) | (m > e) | (c["iso_week"] < 1) | (c["iso_week"] > 53))
        if len(bad):
            out.append(f"site {s[bad[0]]}: row {bad[0]} out of range")
        return out

    def iter_csv_lines(self):
        c = self.columns
        if self.benchmark == "A":
            yield A_HEADER + "\n"
            for s, e, m in zip(c["site"].tolist(), c["events"].tolist(), c["marked"].tolist()):
                yield f"{s},{e},{m},{m / e:.6f}\n"
        else:
            yield B_HEADER + "\n"
            for s, y, w, e, m in zip(c["site"].tolist(), c["iso_year"].tolist(), c["iso_week"].tolist(),
                                     c["cum_events"].tolist(), c["cum_marked"].tolist()):
                yield f"{s},{y},{w},{e},{m},{m / e:.6f}\n"

    def csv_bytes(self) -> bytes:
        return "".join(self.iter_csv_lines()).encode("ascii")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            batch = []
            for line in self.iter_csv_lines():
                batch.append(line)
                if len(batch) >= 100_000:
                    fh.write("".join(batch))
                    batch.clear()
            fh.write("".join(batch))


def read_result_csv(path, benchmark: str) -> EngineResult:
    """Load a result CSV back into columns (the rho column is recomputed)."""
    names = ("site", "events", "marked") if benchmark == "A" else (
        "site", "iso_year", "iso_week", "cum_events", "cum_marked")
    cols = {n: [] for n in names}
    with open(path) as fh:
        next(fh)
        for line in fh:
            parts = line.rstrip("\n").split(",")
            for n, v in zip(names, parts):
                cols[n].append(int(v))
    dtypes = {"site": np.uint64}
    return EngineResult(benchmark, "csv", {n: np.asarray(v, dtype=dtypes.get(n, np.int64)) for n, v in cols.items()})


# --- columnar aggregation shared by mapreduce and bucketed ------------------

@dataclass
class Counts:
    """Per-(site, week) event and marked-event counters, sorted, unique keys."""

    site: np.ndarray
    week: np.ndarray
    events: np.ndarray
    marked: np.ndarray

    @classmethod
    def empty(cls) -> "Counts":
        return cls(np.zeros(0, np.uint64), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))

    def __len__(self):
        return len(self.site)

    def take(self, mask) -> "Counts":
        return Counts(self.site[mask], self.week[mask], self.events[mask], self.marked[mask])


def group_counts(site, week, events, marked) -> Counts:
    if len(site) == 0:
        return Counts.empty()
    order = np.lexsort((week, site))
    site, week = site[order], week[order]
    start = np.ones(len(site), dtype=bool)
    start[1:] = (site[1:] != site[:-1]) | (week[1:] != week[:-1])
    idx = np.flatnonzero(start)
    return Counts(site[idx], week[idx],
                  np.add.reduceat(events[order], idx), np.add.reduceat(marked[order], idx))


def merge_counts(parts: list[Counts]) -> Counts:
    parts = [p for p in parts if len(p)]
    if not parts:
        return Counts.empty()
    if len(parts) == 1:
        return parts[0]
    return group_counts(*(np.concatenate([getattr(p, f) for p in parts])
                          for f in ("site", "week", "events", "marked")))


def map_blocks(blocks: Iterable[np.ndarray], benchmark: str) -> Counts:
    """Map blocks of records to (site, week, flag) and combine them once.

    Blocks are parsed one at a time while they are still in cache; the
    combiner then sorts the whole input in a single pass. MalStone A ignores
    the bucket, so its combiner keys on the site alone.
    """
    sites, weeks, flags = [], [], []
    for block in blocks:
        sites.append(codec.block_site(block))
        flags.append(codec.block_flag(block))
        if benchmark == "B":
            weeks.append(isoweek.week_index(codec.block_days(block)))
    if not sites:
        return Counts.empty()
    site = np.concatenate(sites)
    week = np.concatenate(weeks) if weeks else np.zeros(len(site), dtype=np.int64)
    flag = np.concatenate(flags).astype(np.int64)
    return group_counts(site, week, np.ones(len(site), dtype=np.int64), flag)


def map_block(block: np.ndarray, benchmark: str) -> Counts:
    return map_blocks([block], benchmark)


def finalize(counts: Counts, benchmark: str) -> dict[str, np.ndarray]:
    """Turn merged counters for whole sites into output columns."""
    if benchmark == "A":
        if len(counts) == 0:
            return {"site": counts.site, "events": counts.events, "marked": counts.marked}
        start = np.ones(len(counts), dtype=bool)
        start[1:] = counts.site[1:] != counts.site[:-1]
        idx = np.flatnonzero(start)
        return {"site": counts.site[idx],
                "events": np.add.reduceat(counts.events, idx),
                "marked": np.add.reduceat(counts.marked, idx)}
    year, week = isoweek.iso_from_week_index(counts.week)
    cum_e = np.cumsum(counts.events)
    cum_m = np.cumsum(counts.marked)
    if len(counts):
        start = np.ones(len(counts), dtype=bool)
        start[1:] = counts.site[1:] != counts.site[:-1]
        group = np.cumsum(start) - 1
        idx = np.flatnonzero(start)
        base_e = (cum_e - counts.events)[idx][group]
        base_m = (cum_m - counts.marked)[idx][group]
        cum_e, cum_m = cum_e - base_e, cum_m - base_m
    return {"site": counts.site, "iso_year": np.asarray(year, dtype=np.int64),
            "iso_week": np.asarray(week, dtype=np.int64), "cum_events": cum_e, "cum_marked": cum_m}


def _column_names(benchmark: str) -> tuple[str, ...]:
    return ("site", "events", "marked") if benchmark == "A" else (
        "site", "iso_year", "iso_week", "cum_events", "cum_marked")


def _concat_columns(parts: list[dict], benchmark: str) -> dict[str, np.ndarray]:
    names = _column_names(benchmark)
    if not parts:
        return {n: np.zeros(0, np.uint64 if n == "site" else np.int64) for n in names}
    cols = {n: np.concatenate([p[n] for p in parts]) for n in names}
    if benchmark == "A":
        order = np.argsort(cols["site"], kind="stable")
    else:
        order = np.lexsort((cols["iso_week"], cols["iso_year"], cols["site"]))
    return {n: v[order] for n, v in cols.items()}


def _run_tasks(fn, args: list[tuple], workers: int) -> list:
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(min(workers, len(args))) as pool:
        return list(pool.map(fn, *zip(*args)))


# --- mapreduce engine -------------------------------------------------------

def _splits(dataset: Dataset) -> list[tuple[str, int, int]]:
    out = []
    for ref in dataset.partitions:
        size = os.path.getsize(ref.path)
        if size % RECORD_SIZE:
            raise codec.TruncatedFile(f"{ref.path}: size {size} is not a multiple of {RECORD_SIZE}")
        n = size // RECORD_SIZE
        for a in range(0, n, SPLIT_RECORDS):
            out.append((str(ref.path), a, min(a + SPLIT_RECORDS, n)))
    return out


def _spill(path: str, arrays: list[np.ndarray]) -> str:
    # One .npy per spill: int64 columns ride along as uint64 views.
    np.save(path, np.stack([np.ascontiguousarray(a).view(np.uint64) for a in arrays]))
    return path


def _unspill(path: str) -> list[np.ndarray]:
    rows = np.load(path)
    return [rows[0]] + [r.view(np.int64) for r in rows[1:]]


def _map_task(path: str, start: int, stop: int, reducers: int, benchmark: str,
              spill_prefix: str | None = None) -> list:
    combined = map_blocks(codec.iter_blocks(path, CHUNK_RECORDS, start, stop), benchmark)
    # Shuffle: route each combined counter to its reducer.
    if reducers == 1:
        parts = [combined]
    else:
        dest = combined.site % np.uint64(reducers)
        parts = [combined.take(dest == r) for r in range(reducers)]
    if spill_prefix is None:
        return parts
    return [_spill(f"{spill_prefix}-r{r:04d}.npy", [p.site, p.week, p.events, p.marked])
            for r, p in enumerate(parts)]


def _reduce_task(partials: list, benchmark: str, spill_path: str | None = None):
    partials = [Counts(*_unspill(p)) if isinstance(p, str) else p for p in partials]
    cols = finalize(merge_counts(partials), benchmark)
    if spill_path is None:
        return cols
    return _spill(spill_path, list(cols.values()))


def _run_mapreduce(dataset: Dataset, benchmark: str, reducers: int, workers: int,
                   work_dir=None) -> tuple[dict, dict]:
    """Map, shuffle and reduce. Worker processes exchange data through spill
    files in a scratch directory instead of pickling it through pipes."""
    t0 = time.perf_counter()
    splits = _splits(dataset)
    spill = None
    if workers > 1:
        root = Path(work_dir) if work_dir is not None else dataset.root
        spill = Path(tempfile.mkdtemp(prefix="malstone-shuffle-", dir=root))
    try:
        tasks = [(p, a, b, reducers, benchmark, None if spill is None else str(spill / f"map-{i:05d}"))
                 for i, (p, a, b) in enumerate(splits)]
        mapped = _run_tasks(_map_task, tasks, workers)
        t1 = time.perf_counter()
        by_reducer = [[m[r] for m in mapped] for r in range(reducers)]
        t2 = time.perf_counter()
        reduced = _run_tasks(_reduce_task, [(parts, benchmark, None if spill is None else str(spill / f"reduce-{r:04d}.npy"))
                                            for r, parts in enumerate(by_reducer)], workers)
        if spill is not None:
            names = _column_names(benchmark)
            reduced = [dict(zip(names, _unspill(p))) for p in reduced]
        cols = _concat_columns(reduced, benchmark)
    finally:
        if spill is not None:
            shutil.rmtree(spill, ignore_errors=True)
    t3 = time.perf_counter()
    return cols, {"map": t1 - t0, "shuffle": t2 - t1, "reduce": t3 - t2}


# --- bucketed engine --------------------------------------------------------

def _bucket_stage1(path: str, out_dir: str, buckets: int) -> list[int]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = [0] * buckets
    handles = [open(out_dir / f"bucket-{b:04d}.dat", "wb") for b in range(buckets)]
    try:
        for block in codec.iter_blocks(path, CHUNK_RECORDS):
            dest = (codec.block_site(block) % np.uint64(buckets)).astype(np.int64)
            order = np.argsort(dest, kind="stable")
            bounds = np.searchsorted(dest[order], np.arange(buckets + 1))
            rows = block[order]
            for b in range(buckets):
                lo, hi = bounds[b], bounds[b + 1]
                if hi > lo:
                    handles[b].write(rows[lo:hi].tobytes())
                    counts[b] += int(hi - lo)
    finally:
        for h in handles:
            h.close()
    return counts


def _bucket_stage2(bucket: int, files: list[str], benchmark: str) -> dict:
    try:
        # Stage 1 validated every record on the way in.
        blocks = (b for f in files for b in codec.iter_blocks(f, CHUNK_RECORDS, validate=False))
        return finalize(map_blocks(blocks, benchmark), benchmark)
    except Exception as e:
        raise RuntimeError(f"bucket {bucket} failed ({', '.join(files)}): {e}") from e


def _run_bucketed(dataset: Dataset, benchmark: str, buckets: int, workers: int,
                  work_dir=None) -> tuple[dict, dict]:
    t0 = time.perf_counter()
    root = Path(work_dir) if work_dir is not None else dataset.root
    root.mkdir(parents=True, exist_ok=True)
    work = Path(tempfile.mkdtemp(prefix="malstone-buckets-", dir=root))
    src_dirs = [str(work / f"src-{i:04d}") for i in range(len(dataset.partitions))]
    _run_tasks(_bucket_stage1, [(str(ref.path), d, buckets)
                                for ref, d in zip(dataset.partitions, src_dirs)], workers)
    t1 = time.perf_counter()
    tasks = []
    for b in range(buckets):
        files = [str(Path(d) / f"bucket-{b:04d}.dat") for d in src_dirs]
        tasks.append((b, [f for f in files if os.path.getsize(f) > 0], benchmark))
    reduced = _run_tasks(_bucket_stage2, tasks, workers)
    cols = _concat_columns(reduced, benchmark)
    t2 = time.perf_counter()
    shutil.rmtree(work)
    return cols, {"bucket": t1 - t0, "reduce": t2 - t1}


# --- reference engine -------------------------------------------------------

_SLOT = 1 << 16  # distinct week buckets one reference scan can track
_MARK = 1 << 40  # packs (events, marked) into one int: events + marked * _MARK


def _reference_scan(dataset: Dataset, benchmark: str):
    """Single pass over every record, accumulating packed per-site counters.

    Keys are ``site * _SLOT + slot`` where ``slot`` numbers the distinct
    week buckets in order of first appearance (always 0 for MalStone A).
    """
    line_re = codec._LINE
    counts: dict[int, int] = {}
    day_slot: dict[bytes, int] = {}
    buckets: list[WeekBucket] = []
    slot_of: dict[WeekBucket, int] = {}
    by_week = benchmark == "B"
    for ref in dataset.partitions:
        path = ref.path
        size = os.path.getsize(path)
        if size % RECORD_SIZE:
            raise codec.TruncatedFile(f"{path}: size {size} is not a multiple of {RECORD_SIZE}")
        base = 0
        with open(path, "rb") as fh:
            while True:
                buf = fh.read(65536 * RECORD_SIZE)
                if not buf:
                    break
                for off in range(0, len(buf), RECORD_SIZE):
                    day = buf[off + 31:off + 41]
                    if line_re.fullmatch(buf, off, off + RECORD_SIZE) is None or day not in day_slot:
                        bucket = _reference_check(buf[off:off + RECORD_SIZE], base + off, path)
                        if not by_week:
                            slot = 0
                        elif bucket in slot_of:
                            slot = slot_of[bucket]
                        else:
                            slot = slot_of[bucket] = len(buckets)
                            buckets.append(bucket)
                            if slot >= _SLOT:
                                raise ValueError("dataset spans too many weeks for the reference engine")
                        day_slot[day] = slot
                    key = int(buf[off + 51:off + 71]) * _SLOT + day_slot[day]
                    counts[key] = counts.get(key, 0) + (_MARK + 1 if buf[off + 98] == 49 else 1)
                base += len(buf)
    return counts, buckets


def _reference_check(line: bytes, offset: int, path) -> WeekBucket:
    try:
        r = codec.decode_record(line)
    except codec.MalformedRecord as e:
        raise codec.MalformedRecord(e.reason, offset, path) from None
    return iso_week_bucket(r.timestamp)


def _run_reference(dataset: Dataset, benchmark: str) -> tuple[dict, dict]:
    t0 = time.perf_counter()
    counts, buckets = _reference_scan(dataset, benchmark)
    t1 = time.perf_counter()
    per_site: dict[int, dict] = {}
    for key, packed in counts.items():
        site, slot = divmod(key, _SLOT)
        marked, events = divmod(packed, _MARK)
        bucket = buckets[slot] if benchmark == "B" else None
        per_site.setdefault(site, {})[bucket] = (events, marked)
    rows = []
    for site in sorted(per_site):
        if benchmark == "A":
            events, marked = per_site[site][None]
            rows.append((site, events, marked))
        else:
            for entry in _series_from_counts(site, per_site[site]).entries:
                rows.append((site, entry.bucket.iso_year, entry.bucket.iso_week, entry.cum_events, entry.cum_marked))
    names = ("site", "events", "marked") if benchmark == "A" else (
        "site", "iso_year", "iso_week", "cum_events", "cum_marked")
    cols = {}
    for i, n in enumerate(names):
        cols[n] = np.array([r[i] for r in rows], dtype=np.uint64 if n == "site" else np.int64)
    t2 = time.perf_counter()
    return cols, {"scan": t1 - t0, "reduce": t2 - t1}


# --- entry points -----------------------------------------------------------

def _run(benchmark: str, dataset, engine: str, reducers: int, workers: int, work_dir) -> EngineResult:
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}; choose from {', '.join(ENGINES)}")
    if reducers < 1 or workers < 1:
        raise ValueError("reducers and workers must be at least 1")
    if not isinstance(dataset, Dataset):
        dataset = Dataset.open(dataset)
    t0 = time.perf_counter()
    if engine == "mapreduce":
        cols, timing = _run_mapreduce(dataset, benchmark, reducers, workers, work_dir)
    elif engine == "bucketed":
        cols, timing = _run_bucketed(dataset, benchmark, reducers, workers, work_dir)
    else:
        cols, timing = _run_reference(dataset, benchmark)
    timing["total"] = time.perf_counter() - t0
    return EngineResult(benchmark, engine, cols, timing)


def run_malstone_a(dataset, engine: str = "mapreduce", reducers: int = 4, workers: int = 1,
                   work_dir=None) -> EngineResult:
    """Per-site events, marked events and their ratio over the whole dataset."""
    return _run("A", dataset, engine, reducers, workers, work_dir)


def run_malstone_b(dataset, engine: str = "mapreduce", reducers: int = 4, workers: int = 1,
                   work_dir=None) -> EngineResult:
    """Per-site cumulative week-by-week series of events and marked events."""
    return _run("B", dataset, engine, reducers, workers, work_dir)


def run_benchmark(benchmark: str, dataset, engine: str = "mapreduce", reducers: int = 4,
                  workers: int = 1, work_dir=None) -> EngineResult:
    if benchmark not in ("A", "B"):
        raise ValueError(f"benchmark must be 'A' or 'B', got {benchmark!r}")
    return _run(benchmark, dataset, engine, reducers, workers, work_dir)
