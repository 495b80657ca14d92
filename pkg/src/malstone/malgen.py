"""Deterministic site-entity-mark log generator.

Generation runs in three phases:

1. coordinator: events for the marked sites and the ground-truth mark table;
2. scatter: marked events are dealt round-robin to nodes, and the seed package
   (mark table, allocations, per-node sub-seeds, site ranges) goes to disk;
3. local: each node independently fills its quota with unmarked-site events.

Randomness
----------
All draws come from numpy's PCG64 bit generator, seeded through
``PCG64(seed)`` (i.e. ``SeedSequence(seed)``), using only ``random_raw``.
Uniforms are the top 53 bits of a raw word scaled by 2**-53, and an integer
in ``[0, n)`` is ``floor(uniform * n)``. Nothing depends on numpy's
``Generator`` distribution code, whose streams are not version-stable.
The coordinator uses ``PCG64(master_seed)``. Node ``k`` uses three streams
built from its sub-seed ``s``: ``PCG64(s)`` for site event counts,
``PCG64(s).jumped(1)`` for entity draws and ``PCG64(s).jumped(2)`` for
timestamps. Each stream is consumed strictly in order, so chunk sizes and
worker counts cannot change the output.
"""
from __future__ import annotations

import datetime as dt
import json
import logging
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from malstone import codec, isoweek
from malstone.codec import PartitionRef
from malstone.model import EventRecord, GenConfig, validate_config

log = logging.getLogger(__name__)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1
NEVER = np.iinfo(np.int64).max  # mark time of an entity that is never marked
RNG_DESCRIPTION = "numpy PCG64 random_raw; uniform = (raw >> 11) * 2**-53; int = floor(uniform * n)"


class ConfigInfeasible(ValueError):
    pass


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK64
    return h


def node_name(node_index: int) -> str:
    return f"node-{node_index:04d}"


def node_hash(name: str) -> str:
    return f"{fnv1a_64(name.encode('utf-8')) & ((1 << 48) - 1):012x}"


def node_seed(master_seed: int, node_index: int) -> int:
    return fnv1a_64(master_seed.to_bytes(8, "little") + node_index.to_bytes(8, "little"))


class Stream:
    """Sequential uniform/integer draws from one PCG64 stream."""

    def __init__(self, bitgen: np.random.PCG64):
        self.bitgen = bitgen

    @classmethod
    def seeded(cls, seed: int, jumps: int = 0) -> "Stream":
        bg = np.random.PCG64(seed)
        if jumps:
            bg = bg.jumped(jumps)
        return cls(bg)

    def uniform(self, n: int) -> np.ndarray:
        raw = self.bitgen.random_raw(n)
        return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def below(self, n: int, bound: int) -> np.ndarray:
        if bound > 2**53:
            raise ValueError("integer draws are limited to bounds <= 2**53")
        return np.floor(self.uniform(n) * bound).astype(np.int64)


def sample_event_count(uniform_draw, alpha: float, x_min: int, x_max: int):
    """Discretized Pareto inverse transform: ``floor(x_min * (1-u)**(-1/alpha))``.

    Accepts a scalar draw or an array of draws; the result is clamped to
    ``[x_min, x_max]``.
    """
    u = np.asarray(uniform_draw, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore"):
        x = np.floor(x_min * np.power(1.0 - u, -1.0 / alpha))
    x = np.clip(np.nan_to_num(x, nan=x_max, posinf=x_max), x_min, x_max).astype(np.int64)
    return int(x) if x.ndim == 0 else x


def mark_time_update(current: Optional[int], visit_time: int, draw_success: bool, delay: int) -> Optional[int]:
    """Fold one marked-site visit into an entity's mark time.

    A successful draw marks the entity at ``visit_time + delay`` unless it is
    already marked earlier. Times are anything supporting ``+`` and ordering
    (epoch seconds or datetimes with a timedelta delay).
    """
    if not draw_success:
        return current
    candidate = visit_time + delay
    if current is None or candidate < current:
        return candidate
    return current


class MarkTable:
    """Ground truth entity -> mark time, held as sorted parallel arrays."""

    def __init__(self, entities=(), times=()):
        entities = np.asarray(entities, dtype=np.uint64)
        times = np.asarray(times, dtype=np.int64)
        order = np.argsort(entities, kind="stable")
        self.entities = entities[order]
        self.times = times[order]
        if len(self.entities) > 1 and (np.diff(self.entities) == 0).any():
            raise ValueError("mark table has duplicate entities")

    def __len__(self):
        return len(self.entities)

    def __contains__(self, entity):
        i = np.searchsorted(self.entities, np.uint64(entity))
        return i < len(self.entities) and self.entities[i] == entity

    def get_epoch(self, entity) -> Optional[int]:
        i = np.searchsorted(self.entities, np.uint64(entity))
        if i < len(self.entities) and self.entities[i] == entity:
            return int(self.times[i])
        return None

    def get(self, entity):
        s = self.get_epoch(entity)
        return None if s is None else isoweek.from_epoch(s)

    def as_dict(self) -> dict:
        """entity id -> naive UTC datetime, for pure-Python consumers."""
        return {int(e): isoweek.from_epoch(t) for e, t in zip(self.entities, self.times)}

    def lookup(self, entities: np.ndarray) -> np.ndarray:
        """Mark times (epoch seconds) for an array of entities; ``NEVER`` if unmarked."""
        entities = np.asarray(entities, dtype=np.uint64)
        if len(self.entities) == 0:
            return np.full(entities.shape, NEVER, dtype=np.int64)
        i = np.searchsorted(self.entities, entities)
        i = np.minimum(i, len(self.entities) - 1)
        return np.where(self.entities[i] == entities, self.times[i], NEVER)

    def flags(self, entities: np.ndarray, epochs: np.ndarray) -> np.ndarray:
        return self.lookup(entities) <= epochs

    def to_tsv(self, path) -> None:
        with open(path, "w") as fh:
            for e, t in zip(self.entities.tolist(), self.times.tolist()):
                fh.write(f"{e}\t{isoweek.from_epoch(t).isoformat(sep=' ')}\n")

    @classmethod
    def from_tsv(cls, path) -> "MarkTable":
        ents, times = [], []
        with open(path) as fh:
            for line in fh:
                e, ts = line.rstrip("\n").split("\t")
                ents.append(int(e))
                times.append(isoweek.to_epoch(dt.datetime.fromisoformat(ts)))
        return cls(ents, times)


@dataclass
class MarkedEvents:
    """Marked-site event precursors: no node hash or sequence number yet."""

    epoch: np.ndarray
    site: np.ndarray
    entity: np.ndarray
    flag: np.ndarray

    def __len__(self):
        return len(self.epoch)


def generate_marked_phase(cfg: GenConfig, stream: Stream | None = None) -> tuple[MarkedEvents, MarkTable]:
    problems = validate_config(cfg)
    if problems:
        raise ValueError("invalid config: " + "; ".join(problems))
    stream = stream or Stream.seeded(cfg.master_seed)
    start, end = cfg.period_start_epoch, cfg.period_end_epoch
    m = cfg.marked_sites

    start_day = stream.below(m, cfg.period_days)
    counts = sample_event_count(stream.uniform(m), cfg.alpha, cfg.events_min, cfg.events_max)
    counts = np.atleast_1d(counts).astype(np.int64)
    demand = int(counts.sum())
    if demand > cfg.total_records:
        raise ConfigInfeasible(
            f"marked sites need {demand} events but the record budget is {cfg.total_records}; "
            "raise records_per_node or lower marked_sites"
        )

    site = np.repeat(np.arange(m, dtype=np.uint64), counts)
    site_start = start + np.repeat(start_day, counts) * isoweek.SECONDS_PER_DAY
    entity = stream.below(demand, cfg.entities).astype(np.uint64)
    epoch = site_start + np.floor(stream.uniform(demand) * (end - site_start)).astype(np.int64)
    success = stream.uniform(demand) < cfg.p_mark

    # Folding mark_time_update over the visits is a per-entity min over
    # successful visits of visit + delay.
    cand_ent = entity[success]
    cand_time = epoch[success] + cfg.delay_seconds
    ents, times = _min_by_key(cand_ent, cand_time)

    if cfg.background_mark_rate > 0:
        hit = stream.uniform(cfg.entities) < cfg.background_mark_rate
        bg_time = start + stream.below(cfg.entities, end - start)
        bg_ent = np.flatnonzero(hit).astype(np.uint64)
        ents, times = _min_by_key(np.concatenate([ents, bg_ent]), np.concatenate([times, bg_time[hit]]))

    table = MarkTable(ents, times)
    flag = table.flags(entity, epoch)
    return MarkedEvents(epoch, site, entity, flag), table


def _min_by_key(keys: np.ndarray, values: np.ndarray):
    if len(keys) == 0:
        return keys.astype(np.uint64), values.astype(np.int64)
    order = np.lexsort((values, keys))
    keys, values = keys[order], values[order]
    first = np.ones(len(keys), dtype=bool)
    first[1:] = keys[1:] != keys[:-1]
    return keys[first], values[first]


@dataclass
class SeedPackage:
    config: GenConfig
    mark_table: MarkTable
    allocations: list[np.ndarray]  # per node, (n, 100) encoded marked events
    node_seeds: list[int]
    site_ranges: list[tuple[int, int]]  # per node, half-open unmarked site ids
    node_hashes: list[str] = field(default_factory=list)

    def allocation_records(self, node_index: int) -> Iterator[EventRecord]:
        for row in self.allocations[node_index]:
            yield codec.decode_record(row.tobytes())

    def to_json(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "node_seeds": [str(s) for s in self.node_seeds],
            "node_hashes": self.node_hashes,
            "site_ranges": [list(r) for r in self.site_ranges],
            "allocation_counts": [len(a) for a in self.allocations],
            "rng": RNG_DESCRIPTION,
            "numpy_version": np.__version__,
        }


def split_site_ranges(lo: int, hi: int, nodes: int) -> list[tuple[int, int]]:
    size, extra = divmod(hi - lo, nodes)
    ranges = []
    for k in range(nodes):
        n = size + (1 if k < extra else 0)
        ranges.append((lo, lo + n))
        lo += n
    return ranges


def build_and_scatter_seed(cfg: GenConfig, marked: MarkedEvents, mark_table: MarkTable, data_dir) -> SeedPackage:
    hashes = [node_hash(node_name(k)) for k in range(cfg.nodes)]
    allocations = []
    for k in range(cfg.nodes):
        sel = slice(k, None, cfg.nodes)
        n = len(marked.epoch[sel])
        allocations.append(codec.encode_block(
            hashes[k], np.arange(n, dtype=np.int64), marked.epoch[sel],
            marked.site[sel], marked.entity[sel], marked.flag[sel],
        ))
    seed = SeedPackage(
        config=cfg,
        mark_table=mark_table,
        allocations=allocations,
        node_seeds=[node_seed(cfg.master_seed, k) for k in range(cfg.nodes)],
        site_ranges=split_site_ranges(cfg.marked_sites, cfg.total_sites, cfg.nodes),
        node_hashes=hashes,
    )
    if data_dir is not None:
        write_seed(seed, data_dir)
    return seed


def write_seed(seed: SeedPackage, data_dir) -> None:
    seed_dir = Path(data_dir) / "seed"
    try:
        (seed_dir / "allocations").mkdir(parents=True, exist_ok=True)
        seed.mark_table.to_tsv(seed_dir / "marks.tsv")
        for k, block in enumerate(seed.allocations):
            codec.write_blocks(PartitionRef(k, 0, seed_dir / "allocations" / f"{node_name(k)}.dat"), [block])
        with open(seed_dir / "package.json", "w") as fh:
            json.dump(seed.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as e:
        raise OSError(e.errno, f"writing seed package under {seed_dir}: {e}") from e


def load_seed(data_dir) -> SeedPackage:
    seed_dir = Path(data_dir) / "seed"
    pkg = json.loads((seed_dir / "package.json").read_text())
    cfg = GenConfig.from_dict(pkg["config"])
    allocations = []
    for k in range(cfg.nodes):
        path = seed_dir / "allocations" / f"{node_name(k)}.dat"
        blocks = list(codec.iter_blocks(path))
        allocations.append(np.concatenate(blocks) if blocks else np.empty((0, codec.RECORD_SIZE), np.uint8))
    return SeedPackage(
        config=cfg,
        mark_table=MarkTable.from_tsv(seed_dir / "marks.tsv"),
        allocations=allocations,
        node_seeds=[int(s) for s in pkg["node_seeds"]],
        site_ranges=[tuple(r) for r in pkg["site_ranges"]],
        node_hashes=pkg["node_hashes"],
    )


def _site_plan(cfg: GenConfig, stream: Stream, lo: int, hi: int, needed: int, node_index: int):
    """Sites consumed in id order and their (truncated) event counts."""
    counts = []
    total = 0
    next_site = lo
    batch = 1024
    while total < needed:
        if next_site >= hi:
            raise ConfigInfeasible(
                f"node {node_index}: site range [{lo}, {hi}) exhausted with "
                f"{needed - total} records still to generate; raise total_sites"
            )
        c = np.atleast_1d(sample_event_count(stream.uniform(batch), cfg.alpha, cfg.events_min, cfg.events_max))
        c = c[: hi - next_site]
        counts.append(c)
        total += int(c.sum())
        next_site += len(c)
    counts = np.concatenate(counts) if counts else np.zeros(0, np.int64)
    cum = np.cumsum(counts)
    used = int(np.searchsorted(cum, needed)) + 1 if needed else 0
    counts = counts[:used].copy()
    if used:
        counts[-1] -= int(cum[used - 1]) - needed
    return np.arange(lo, lo + used, dtype=np.uint64), counts


def generate_node_partition(node_index: int, seed: SeedPackage, data_dir,
                            chunk_records: int = codec.DEFAULT_CHUNK) -> tuple[PartitionRef, int]:
    cfg = seed.config
    alloc = seed.allocations[node_index]
    needed = cfg.records_per_node - len(alloc)
    if needed < 0:
        raise ConfigInfeasible(f"node {node_index}: allocation exceeds records_per_node")
    s = seed.node_seeds[node_index]
    counts_stream, entity_stream, time_stream = Stream.seeded(s), Stream.seeded(s, 1), Stream.seeded(s, 2)
    lo, hi = seed.site_ranges[node_index]
    sites, counts = _site_plan(cfg, counts_stream, lo, hi, needed, node_index)
    bounds = np.cumsum(counts)
    start, span = cfg.period_start_epoch, cfg.period_end_epoch - cfg.period_start_epoch
    nhash = seed.node_hashes[node_index]

    def blocks():
        yield alloc
        for a in range(0, needed, chunk_records):
            b = min(a + chunk_records, needed)
            n = b - a
            site = sites[np.searchsorted(bounds, np.arange(a, b), side="right")]
            entity = entity_stream.below(n, cfg.entities).astype(np.uint64)
            epoch = start + time_stream.below(n, span)
            flag = seed.mark_table.flags(entity, epoch)
            seq = np.arange(len(alloc) + a, len(alloc) + b, dtype=np.int64)
            yield codec.encode_block(nhash, seq, epoch, site, entity, flag)

    ref = PartitionRef.under(data_dir, node_index)
    count = codec.write_blocks(ref, blocks())
    return ref, count


_worker_seed: SeedPackage | None = None


def _init_worker(seed: SeedPackage) -> None:
    global _worker_seed
    _worker_seed = seed


def _node_task(node_index: int, data_dir: str):
    ref, count = generate_node_partition(node_index, _worker_seed, data_dir)
    return node_index, count


def _clear_layout(data_dir: Path) -> None:
    for p in data_dir.glob("node-[0-9][0-9][0-9][0-9]"):
        shutil.rmtree(p)
    if (data_dir / "seed").exists():
        shutil.rmtree(data_dir / "seed")
    (data_dir / "manifest.json").unlink(missing_ok=True)


def generate_dataset(cfg: GenConfig, data_dir, workers: int = 1) -> dict:
    """Run all three phases and write the manifest; returns a summary."""
    problems = validate_config(cfg)
    if problems:
        raise ValueError("invalid config: " + "; ".join(problems))
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    _clear_layout(data_dir)

    t0 = time.perf_counter()
    marked, table = generate_marked_phase(cfg)
    t1 = time.perf_counter()
    seed = build_and_scatter_seed(cfg, marked, table, data_dir)
    t2 = time.perf_counter()
    log.info("seed: %d marked events, %d marked entities", len(marked), len(table))

    counts = {}
    if workers <= 1 or cfg.nodes == 1:
        for k in range(cfg.nodes):
            counts[k] = generate_node_partition(k, seed, data_dir)[1]
    else:
        with ProcessPoolExecutor(min(workers, cfg.nodes), initializer=_init_worker, initargs=(seed,)) as pool:
            for k, n in pool.map(_node_task, range(cfg.nodes), [str(data_dir)] * cfg.nodes):
                counts[k] = n
    t3 = time.perf_counter()

    parts = [(PartitionRef.under(data_dir, k), counts[k]) for k in range(cfg.nodes)]
    manifest = codec.write_manifest(data_dir, cfg, parts)
    return {
        "records": manifest["total_records"],
        "bytes": manifest["total_bytes"],
        "marked_events": len(marked),
        "marked_entities": len(table),
        "seconds": {"seed": t1 - t0, "scatter": t2 - t1, "local": t3 - t2},
    }
