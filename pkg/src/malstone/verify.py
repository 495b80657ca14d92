"""Property checks over a generated dataset, as run by ``malstone verify``."""
from __future__ import annotations

import hashlib
import os
import random
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from malstone import codec, engines
from malstone.codec import RECORD_SIZE, Dataset, PartitionRef
from malstone.malgen import MarkTable, load_seed


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}" + (f": {self.detail}" if self.detail else "")


def check_manifest(ds: Dataset) -> Check:
    if ds.manifest is None:
        return Check("manifest", False, f"no manifest.json under {ds.root}")
    total = 0
    for entry, ref in zip(ds.manifest["partitions"], ds.partitions):
        size = os.path.getsize(ref.path) if ref.path.exists() else -1
        if size != entry["records"] * RECORD_SIZE:
            return Check("manifest", False, f"{ref.path}: size {size} != {entry['records']} records x {RECORD_SIZE}")
        digest = codec.file_checksum(ref.path)
        if digest != entry["checksum"]:
            return Check("manifest", False, f"{ref.path}: checksum {digest} != manifest {entry['checksum']}")
        total += entry["records"]
    if total != ds.manifest["total_records"]:
        return Check("manifest", False, f"partition counts sum to {total}, manifest says {ds.manifest['total_records']}")
    return Check("manifest", True, f"{len(ds.partitions)} partitions, {total} records, checksums match")


def check_codec_roundtrip(ds: Dataset, samples: int, seed: int = 0) -> Check:
    rng = random.Random(seed)
    sizes = [os.path.getsize(p.path) // RECORD_SIZE for p in ds.partitions]
    total = sum(sizes)
    if total == 0:
        return Check("codec round-trip", True, "empty dataset")
    picks = sorted(rng.randrange(total) for _ in range(min(samples, total)))
    checked = 0
    base = 0
    for ref, n in zip(ds.partitions, sizes):
        mine = [i - base for i in picks if base <= i < base + n]
        base += n
        if not mine:
            continue
        with open(ref.path, "rb") as fh:
            for i in mine:
                fh.seek(i * RECORD_SIZE)
                line = fh.read(RECORD_SIZE)
                try:
                    again = codec.encode_record(codec.decode_record(line))
                except codec.MalformedRecord as e:
                    return Check("codec round-trip", False, f"{ref.path} byte {i * RECORD_SIZE}: {e.reason}")
                if again != line:
                    return Check("codec round-trip", False, f"{ref.path} byte {i * RECORD_SIZE}: re-encoding differs")
                checked += 1
    return Check("codec round-trip", True, f"{checked} sampled records")


def _columns(ds: Dataset):
    """Entity, epoch, flag for every record, plus (partition, row) locators."""
    ents, epochs, flags, where = [], [], [], []
    for k, ref in enumerate(ds.partitions):
        row = 0
        for block in codec.iter_blocks(ref.path):
            ents.append(codec.block_entity(block))
            epochs.append(codec.block_epoch(block))
            flags.append(codec.block_flag(block))
            where.append(np.stack([np.full(len(block), k), np.arange(row, row + len(block))], axis=1))
            row += len(block)
    if not ents:
        return np.zeros(0, np.uint64), np.zeros(0, np.int64), np.zeros(0, bool), np.zeros((0, 2), np.int64)
    return np.concatenate(ents), np.concatenate(epochs), np.concatenate(flags), np.concatenate(where)


def _locate(ds: Dataset, where: np.ndarray, i: int) -> str:
    k, row = where[i]
    return f"{ds.partitions[k].path} byte {row * RECORD_SIZE}"


def check_flag_monotonic(ds: Dataset, cols) -> Check:
    ent, epoch, flag, where = cols
    order = np.lexsort((flag, epoch, ent))
    e, f = ent[order], flag[order]
    same = e[1:] == e[:-1]
    bad = np.flatnonzero(same & f[:-1] & ~f[1:])
    if len(bad):
        i = order[bad[0] + 1]
        return Check("flag monotonicity", False,
                     f"entity {ent[i]} has an unflagged record after a flagged one ({_locate(ds, where, i)})")
    return Check("flag monotonicity", True, f"{len(np.unique(ent))} entities follow 0*1*")


def check_flags_vs_marks(ds: Dataset, cols, marks: MarkTable) -> Check:
    ent, epoch, flag, where = cols
    expected = marks.flags(ent, epoch)
    bad = np.flatnonzero(expected != flag)
    if len(bad):
        i = bad[0]
        return Check("flags vs mark table", False,
                     f"entity {ent[i]} flag {int(flag[i])}, mark table says {int(expected[i])} "
                     f"({_locate(ds, where, i)}); {len(bad)} mismatches")
    return Check("flags vs mark table", True, f"{len(flag)} records recomputed from marks.tsv")


def _subset(ds: Dataset, per_partition: int, into: Path) -> Dataset:
    parts = []
    for ref in ds.partitions:
        out = PartitionRef.under(into, ref.node_index, ref.part_index)
        codec.write_blocks(out, codec.iter_blocks(ref.path, stop=per_partition))
        parts.append(out)
    return Dataset(into, parts)


def check_engine_equivalence(ds: Dataset, per_partition: int) -> Check:
    tmp = Path(tempfile.mkdtemp(prefix="malstone-verify-"))
    try:
        sub = _subset(ds, per_partition, tmp)
        for bm in ("A", "B"):
            digests = {}
            for engine, r in (("reference", 1), ("mapreduce", 4), ("bucketed", 8)):
                res = engines.run_benchmark(bm, sub, engine, reducers=r, workers=1)
                digests[engine] = hashlib.sha256(res.csv_bytes()).hexdigest()
            if len(set(digests.values())) != 1:
                return Check("engine equivalence", False, f"MalStone {bm} outputs differ: {digests}")
        n = sub.record_count()
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return Check("engine equivalence", True, f"A and B identical across engines on {n} records")


def check_series_invariants(ds: Dataset, workers: int, flagged_total: int | None) -> Check:
    res = engines.run_malstone_b(ds, "mapreduce", reducers=4, workers=workers)
    problems = res.violations()
    if problems:
        return Check("series invariants", False, problems[0])
    term = res.terminal()
    events, marked = int(term.columns["events"].sum()), int(term.columns["marked"].sum())
    total = ds.record_count()
    if events != total:
        return Check("series invariants", False, f"site events sum to {events}, dataset has {total} records")
    if flagged_total is not None and marked != flagged_total:
        return Check("series invariants", False, f"site marks sum to {marked}, dataset has {flagged_total} flags")
    return Check("series invariants", True, f"{len(term)} sites, {len(res)} series rows; totals conserved")


def run_checks(data_dir, with_ground_truth: bool = False, samples: int = 10_000,
               subset_records: int = 100_000, workers: int = 1) -> list[Check]:
    ds = Dataset.open(data_dir)
    results = [check_manifest(ds)]

    def guarded(name, fn, *args):
        try:
            results.append(fn(*args))
        except (codec.MalformedRecord, codec.TruncatedFile, ValueError, OSError, RuntimeError) as e:
            results.append(Check(name, False, str(e)))

    guarded("codec round-trip", check_codec_roundtrip, ds, samples)
    try:
        cols = _columns(ds)
    except (codec.MalformedRecord, codec.TruncatedFile, ValueError) as e:
        results.append(Check("record scan", False, str(e)))
        return results
    guarded("flag monotonicity", check_flag_monotonic, ds, cols)
    if with_ground_truth:
        try:
            marks = load_seed(data_dir).mark_table
        except (OSError, ValueError) as e:
            results.append(Check("flags vs mark table", False, f"cannot load seed: {e}"))
        else:
            guarded("flags vs mark table", check_flags_vs_marks, ds, cols, marks)
    flagged = int(cols[2].sum())
    del cols
    guarded("engine equivalence", check_engine_equivalence, ds, subset_records)
    guarded("series invariants", check_series_invariants, ds, workers, flagged)
    return results
