"""Fixed-width 100-byte record codec and the on-disk partition layout.

Record layout (byte offsets, 0-based)::

    0-11   node hash, 12 lowercase hex chars
    12-29  per-node event sequence, 18 zero-padded digits
    30     '|'
    31-49  timestamp "YYYY-MM-DD HH:MM:SS" (UTC)
    50     '|'
    51-70  site id, 20 zero-padded digits
    71     '|'
    72-96  entity id, 25 zero-padded digits
    97     '|'
    98     mark flag, '0' or '1'
    99     '\\n'

Scalar functions (:func:`encode_record`, :func:`decode_record`) are the
contract; the ``*_block`` functions are vectorized equivalents over
``(n, 100)`` uint8 arrays and are tested against the scalar ones.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from malstone import isoweek
from malstone.model import (
    ENTITY_ID_LIMIT,
    EVENT_SEQ_LIMIT,
    SITE_ID_LIMIT,
    EventRecord,
    GenConfig,
)

RECORD_SIZE = 100
SEPARATORS = (30, 50, 71, 97)
FLAG_OFFSET = 98
SITE_SLICE = slice(51, 71)
ENTITY_SLICE = slice(72, 97)
TS_SLICE = slice(31, 50)
DEFAULT_CHUNK = 1 << 20  # records per block when streaming files

_HEX = re.compile(r"[0-9a-f]{12}")
_LINE = re.compile(
    rb"[0-9a-f]{12}[0-9]{18}\|"
    rb"([0-9]{4})-([0-9]{2})-([0-9]{2}) ([0-9]{2}):([0-9]{2}):([0-9]{2})\|"
    rb"[0-9]{20}\|[0-9]{25}\|[01]\n"
)


class MalformedRecord(ValueError):
    def __init__(self, reason: str, offset: int | None = None, path=None):
        self.reason = reason
        self.offset = offset
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}: "
        if offset is not None:
            where += f"byte {offset}: "
        super().__init__(where + reason)


class TruncatedFile(ValueError):
    pass


def encode_record(r: EventRecord) -> bytes:
    if not _HEX.fullmatch(r.event_node):
        raise ValueError(f"event_node must be 12 lowercase hex chars, got {r.event_node!r}")
    if not 0 <= r.event_seq < EVENT_SEQ_LIMIT:
        raise ValueError(f"event_seq {r.event_seq} does not fit 18 digits")
    if not 0 <= r.site_id < SITE_ID_LIMIT:
        raise ValueError(f"site_id {r.site_id} does not fit 20 digits")
    if not 0 <= r.entity_id < ENTITY_ID_LIMIT:
        raise ValueError(f"entity_id {r.entity_id} does not fit 25 digits")
    ts = r.timestamp
    if ts.tzinfo is not None or ts.microsecond:
        raise ValueError(f"timestamp must be naive UTC with whole seconds, got {ts!r}")
    line = (
        f"{r.event_node}{r.event_seq:018d}|"
        f"{ts.year:04d}-{ts.month:02d}-{ts.day:02d} "
        f"{ts.hour:02d}:{ts.minute:02d}:{ts.second:02d}|"
        f"{r.site_id:020d}|{r.entity_id:025d}|{'1' if r.mark_flag else '0'}\n"
    )
    return line.encode("ascii")


def _template_problem(line: bytes) -> str:
    """Name the first byte that breaks the layout, for error messages."""
    expect = {30: b"|", 50: b"|", 71: b"|", 97: b"|", 99: b"\n",
              35: b"-", 38: b"-", 41: b" ", 44: b":", 47: b":"}
    for i, c in enumerate(line):
        if i in expect:
            if bytes([c]) != expect[i]:
                return f"expected {expect[i]!r} at offset {i}, found {bytes([c])!r}"
        elif i < 12:
            if not (48 <= c <= 57 or 97 <= c <= 102):
                return f"non-hex byte {bytes([c])!r} at offset {i}"
        elif i == FLAG_OFFSET:
            if c not in (48, 49):
                return f"mark flag must be '0' or '1', found {bytes([c])!r}"
        elif not 48 <= c <= 57:
            return f"non-digit byte {bytes([c])!r} at offset {i}"
    return "record does not match the layout"


def decode_record(line: bytes) -> EventRecord:
    if len(line) != RECORD_SIZE:
        raise MalformedRecord(f"record is {len(line)} bytes, expected {RECORD_SIZE}")
    m = _LINE.fullmatch(line)
    if m is None:
        raise MalformedRecord(_template_problem(bytes(line)))
    try:
        ts = dt.datetime(*(int(g) for g in m.groups()))
    except ValueError as e:
        raise MalformedRecord(f"invalid timestamp {line[TS_SLICE].decode()!r}: {e}") from None
    return EventRecord(
        event_node=line[:12].decode("ascii"),
        event_seq=int(line[12:30]),
        timestamp=ts,
        site_id=int(line[SITE_SLICE]),
        entity_id=int(line[ENTITY_SLICE]),
        mark_flag=line[FLAG_OFFSET] == 49,
    )


# --- vectorized block codec -------------------------------------------------

def _put_digits(out: np.ndarray, start: int, width: int, values: np.ndarray) -> None:
    v = values.astype(np.uint64, copy=True)
    for col in range(start + width - 1, start - 1, -1):
        out[:, col] = (v % np.uint64(10)).astype(np.uint8) + 48
        v //= np.uint64(10)
    if v.any():
        raise ValueError(f"value does not fit {width} digits")


def encode_block(node_hash: str, seq, epoch, site, entity, flag) -> np.ndarray:
    """Encode column arrays into an ``(n, 100)`` uint8 array of records."""
    if not _HEX.fullmatch(node_hash):
        raise ValueError(f"bad node hash {node_hash!r}")
    seq = np.asarray(seq, dtype=np.int64)
    n = seq.shape[0]
    out = np.empty((n, RECORD_SIZE), dtype=np.uint8)
    out[:, :12] = np.frombuffer(node_hash.encode("ascii"), dtype=np.uint8)
    _put_digits(out, 12, 18, seq)
    epoch = np.asarray(epoch, dtype=np.int64)
    days, secs = np.divmod(epoch, isoweek.SECONDS_PER_DAY)
    y, mo, d = isoweek.civil_from_days(days)
    if n and (y.min() < 1 or y.max() > 9999):
        raise ValueError("timestamp year outside 0001..9999")
    hh, rem = np.divmod(secs, 3600)
    mi, ss = np.divmod(rem, 60)
    _put_digits(out, 31, 4, y)
    _put_digits(out, 36, 2, mo)
    _put_digits(out, 39, 2, d)
    _put_digits(out, 42, 2, hh)
    _put_digits(out, 45, 2, mi)
    _put_digits(out, 48, 2, ss)
    _put_digits(out, 51, 20, np.asarray(site))
    _put_digits(out, 72, 25, np.asarray(entity))
    out[:, FLAG_OFFSET] = np.where(np.asarray(flag, dtype=bool), 49, 48)
    for col, ch in ((30, "|"), (50, "|"), (71, "|"), (97, "|"), (99, "\n"),
                    (35, "-"), (38, "-"), (41, " "), (44, ":"), (47, ":")):
        out[:, col] = ord(ch)
    return out


def _build_bounds():
    lo = np.full(RECORD_SIZE, 48, dtype=np.uint8)
    hi = np.full(RECORD_SIZE, 57, dtype=np.uint8)
    hi[:12] = ord("f")
    for col, ch in ((30, "|"), (50, "|"), (71, "|"), (97, "|"), (99, "\n"),
                    (35, "-"), (38, "-"), (41, " "), (44, ":"), (47, ":")):
        lo[col] = hi[col] = ord(ch)
    hi[FLAG_OFFSET] = 49
    return lo, hi


_LO, _HI = _build_bounds()


def _horner(cols: np.ndarray) -> np.ndarray:
    v = np.zeros(cols.shape[0], dtype=np.int64)
    for j in range(cols.shape[1]):
        v = v * 10 + (cols[:, j].astype(np.int64) - 48)
    return v


def block_epoch(block: np.ndarray) -> np.ndarray:
    y = _horner(block[:, 31:35])
    mo = _horner(block[:, 36:38])
    d = _horner(block[:, 39:41])
    secs = _horner(block[:, 42:44]) * 3600 + _horner(block[:, 45:47]) * 60 + _horner(block[:, 48:50])
    return isoweek.days_from_civil(y, mo, d) * isoweek.SECONDS_PER_DAY + secs


def block_days(block: np.ndarray) -> np.ndarray:
    y = _horner(block[:, 31:35])
    mo = _horner(block[:, 36:38])
    d = _horner(block[:, 39:41])
    return isoweek.days_from_civil(y, mo, d)


def _block_uint(block: np.ndarray, sl: slice, what: str) -> np.ndarray:
    cols = block[:, sl]
    width = cols.shape[1]
    if width > 19:
        # Leading digits beyond the 64-bit range must be zero.
        head = cols[:, : width - 19]
        if (head != 48).any():
            raise ValueError(f"{what} exceeds the supported 19-digit range")
        cols = cols[:, width - 19:]
    v = np.zeros(cols.shape[0], dtype=np.uint64)
    for j in range(cols.shape[1]):
        v = v * np.uint64(10) + (cols[:, j] - np.uint8(48)).astype(np.uint64)
    return v


def block_site(block: np.ndarray) -> np.ndarray:
    return _block_uint(block, SITE_SLICE, "site id")


def block_entity(block: np.ndarray) -> np.ndarray:
    return _block_uint(block, ENTITY_SLICE, "entity id")


def block_flag(block: np.ndarray) -> np.ndarray:
    return block[:, FLAG_OFFSET] == 49


def validate_block(block: np.ndarray, base_offset: int = 0, path=None) -> None:
    """Raise :class:`MalformedRecord` for the first invalid row of ``block``."""
    bad = ((block < _LO) | (block > _HI)).any(axis=1)
    hexcols = block[:, :12]
    bad |= ((hexcols > 57) & (hexcols < 97)).any(axis=1)
    y = _horner(block[:, 31:35])
    mo = _horner(block[:, 36:38])
    d = _horner(block[:, 39:41])
    mo_ok = (mo >= 1) & (mo <= 12)
    dim = isoweek.days_in_month(y, np.where(mo_ok, mo, 1))
    bad |= (y < 1) | ~mo_ok | (d < 1) | (d > dim)
    bad |= (_horner(block[:, 42:44]) > 23) | (_horner(block[:, 45:47]) > 59) | (_horner(block[:, 48:50]) > 59)
    if bad.any():
        row = int(np.argmax(bad))
        offset = base_offset + row * RECORD_SIZE
        try:
            decode_record(block[row].tobytes())
        except MalformedRecord as e:
            raise MalformedRecord(e.reason, offset, path) from None
        raise MalformedRecord("record failed block validation", offset, path)


# --- partitions and datasets ------------------------------------------------

@dataclass(frozen=True)
class PartitionRef:
    node_index: int
    part_index: int
    path: Path

    @classmethod
    def under(cls, data_dir, node_index: int, part_index: int = 0) -> "PartitionRef":
        return cls(node_index, part_index, Path(data_dir) / partition_relpath(node_index, part_index))


def partition_relpath(node_index: int, part_index: int = 0) -> str:
    return f"node-{node_index:04d}/part-{part_index:04d}.dat"


class _RemoveOnError:
    """Open ``path`` for writing; delete the partial file if the body raises."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def __enter__(self):
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(self.path, "wb")
        except OSError as e:
            raise OSError(e.errno, f"cannot create partition {self.path}: {e.strerror}") from e
        return self.fh

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is not None:
            self.path.unlink(missing_ok=True)
            if issubclass(exc_type, OSError) and str(self.path) not in str(exc):
                raise OSError(exc.errno, f"writing {self.path}: {exc}") from exc
        return False


def write_partition(ref: PartitionRef, records: Iterable[EventRecord]) -> int:
    n = 0
    with _RemoveOnError(ref.path) as fh:
        buf = []
        for r in records:
            buf.append(encode_record(r))
            n += 1
            if len(buf) >= 65536:
                fh.write(b"".join(buf))
                buf.clear()
        fh.write(b"".join(buf))
    return n


def write_blocks(ref: PartitionRef, blocks: Iterable[np.ndarray]) -> int:
    """Array-level counterpart of :func:`write_partition`."""
    n = 0
    with _RemoveOnError(ref.path) as fh:
        for block in blocks:
            fh.write(np.ascontiguousarray(block).tobytes())
            n += block.shape[0]
    return n


def _checked_size(path: Path) -> int:
    size = os.path.getsize(path)
    if size % RECORD_SIZE:
        raise TruncatedFile(
            f"{path}: size {size} is not a multiple of {RECORD_SIZE} "
            f"({size % RECORD_SIZE} trailing bytes)"
        )
    return size


def scan_partition(ref: PartitionRef, chunk_records: int = 65536) -> Iterator[EventRecord]:
    path = ref.path if isinstance(ref, PartitionRef) else Path(ref)
    _checked_size(path)
    offset = 0
    with open(path, "rb") as fh:
        while True:
            buf = fh.read(chunk_records * RECORD_SIZE)
            if not buf:
                return
            for i in range(0, len(buf), RECORD_SIZE):
                try:
                    yield decode_record(buf[i:i + RECORD_SIZE])
                except MalformedRecord as e:
                    raise MalformedRecord(e.reason, offset + i, path) from None
            offset += len(buf)


def iter_blocks(path, chunk_records: int = DEFAULT_CHUNK, start: int = 0,
                stop: int | None = None, validate: bool = True) -> Iterator[np.ndarray]:
    """Yield ``(n, 100)`` uint8 blocks for records ``[start, stop)`` of a file."""
    path = Path(path)
    total = _checked_size(path) // RECORD_SIZE
    stop = total if stop is None else min(stop, total)
    with open(path, "rb") as fh:
        fh.seek(start * RECORD_SIZE)
        pos = start
        while pos < stop:
            n = min(chunk_records, stop - pos)
            raw = fh.read(n * RECORD_SIZE)
            if len(raw) != n * RECORD_SIZE:
                raise TruncatedFile(f"{path}: file shrank while reading at record {pos}")
            block = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_SIZE)
            if validate:
                validate_block(block, pos * RECORD_SIZE, path)
            yield block
            pos += n


def file_checksum(path) -> str:
    """64-bit BLAKE2b digest of a file's bytes, as 16 hex chars."""
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 24), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(data_dir, config: GenConfig, partitions: list[tuple[PartitionRef, int]]) -> dict:
    data_dir = Path(data_dir)
    entries = []
    for ref, count in sorted(partitions, key=lambda p: (p[0].node_index, p[0].part_index)):
        entries.append({
            "path": partition_relpath(ref.node_index, ref.part_index),
            "node": ref.node_index,
            "part": ref.part_index,
            "records": count,
            "bytes": count * RECORD_SIZE,
            "checksum": file_checksum(ref.path),
        })
    manifest = {
        "config": config.to_dict(),
        "partitions": entries,
        "total_records": sum(e["records"] for e in entries),
        "total_bytes": sum(e["bytes"] for e in entries),
        "record_size": RECORD_SIZE,
        "checksum_algorithm": "blake2b-64",
    }
    with open(data_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


@dataclass
class Dataset:
    """A data directory: partition files plus, when generated, a manifest."""

    root: Path
    partitions: list[PartitionRef]
    manifest: dict | None = None

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        mpath = root / "manifest.json"
        if mpath.exists():
            manifest = json.loads(mpath.read_text())
            parts = [PartitionRef(e["node"], e["part"], root / e["path"]) for e in manifest["partitions"]]
            return cls(root, parts, manifest)
        parts = []
        for p in sorted(root.glob("node-*/part-*.dat")):
            node = int(p.parent.name.split("-")[1])
            part = int(p.stem.split("-")[1])
            parts.append(PartitionRef(node, part, p))
        if not parts and not root.is_dir():
            raise FileNotFoundError(f"no dataset at {root}")
        return cls(root, parts, None)

    @property
    def config(self) -> GenConfig | None:
        if self.manifest is None:
            return None
        return GenConfig.from_dict(self.manifest["config"])

    def record_count(self) -> int:
        return sum(_checked_size(p.path) for p in self.partitions) // RECORD_SIZE

    def records(self) -> Iterator[EventRecord]:
        for ref in self.partitions:
            yield from scan_partition(ref)
