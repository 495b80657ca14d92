import datetime as dt

import pytest
from hypothesis import strategies as st

from malstone import codec, malgen
from malstone.model import EventRecord, GenConfig

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def rec(site, ts, flag=False, entity=0, seq=0, node="000000000000"):
    if isinstance(ts, str):
        ts = dt.datetime.fromisoformat(ts)
    return EventRecord(node, seq, ts, site, entity, flag)


def write_dataset(root, records, per_partition=None):
    """Write records into node partitions under ``root``; returns the root."""
    records = list(records)
    per_partition = per_partition or max(len(records), 1)
    chunks = [records[i:i + per_partition] for i in range(0, len(records), per_partition)] or [[]]
    for k, chunk in enumerate(chunks):
        codec.write_partition(codec.PartitionRef.under(root, k), chunk)
    return root


timestamps = st.datetimes(min_value=dt.datetime(1970, 1, 1), max_value=dt.datetime(2100, 12, 31, 23, 59, 59)).map(
    lambda t: t.replace(microsecond=0))

records = st.builds(
    EventRecord,
    event_node=st.text(alphabet="0123456789abcdef", min_size=12, max_size=12),
    event_seq=st.integers(0, 10**18 - 1),
    timestamp=timestamps,
    site_id=st.integers(0, 10**20 - 1),
    entity_id=st.integers(0, 10**25 - 1),
    mark_flag=st.booleans(),
)


def small_config(**kw):
    base = dict(nodes=3, records_per_node=4000, total_sites=2000, marked_sites=20, entities=3000,
                master_seed=11)
    base.update(kw)
    return GenConfig(**base)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A generated 12k-record dataset, shared read-only across tests."""
    root = tmp_path_factory.mktemp("small")
    cfg = small_config()
    malgen.generate_dataset(cfg, root)
    return root, cfg
