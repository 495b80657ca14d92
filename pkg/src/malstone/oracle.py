"""Entity-set subsequent proportion of marks, computed from the mark table.

For a site ``j``, ``A_j`` holds the distinct entities that visited ``j``
inside the exposure window, counting a visit by a marked entity only if it
happened strictly before that entity's mark. ``B_j`` holds the members of
``A_j`` whose mark time falls inside the monitor window. Windows are closed
intervals.

This is the definition the benchmark engines approximate with event counts;
it needs the generator's ground truth because the joined log cannot tell
when an entity was marked.
"""
from __future__ import annotations

import datetime as dt
from typing import Iterable, Mapping

from malstone.codec import Dataset
from malstone.malgen import MarkTable
from malstone.model import EventRecord, SpmScore, Window


def _records(dataset) -> Iterable[EventRecord]:
    if isinstance(dataset, (str, bytes)) or hasattr(dataset, "__fspath__"):
        dataset = Dataset.open(dataset)
    if isinstance(dataset, Dataset):
        return dataset.records()
    return dataset


def _marks(mark_table) -> Mapping[int, dt.datetime]:
    if isinstance(mark_table, MarkTable):
        return mark_table.as_dict()
    return mark_table


def exposed_entities(dataset, mark_table, exp_window: Window) -> tuple[dict[int, set], Mapping]:
    marks = _marks(mark_table)
    exposed: dict[int, set] = {}
    for r in _records(dataset):
        if r.timestamp not in exp_window:
            continue
        marked_at = marks.get(r.entity_id)
        if marked_at is not None and not r.timestamp < marked_at:
            continue
        exposed.setdefault(r.site_id, set()).add(r.entity_id)
    return exposed, marks


def oracle_entity_spm(dataset, mark_table, exp_window: Window, mon_window: Window) -> dict[int, SpmScore]:
    exposed, marks = exposed_entities(dataset, mark_table, exp_window)
    out = {}
    for site in sorted(exposed):
        a = exposed[site]
        b = sum(1 for e in a if e in marks and marks[e] in mon_window)
        out[site] = SpmScore(site, len(a), b, b / len(a))
    return out


def oracle_entity_counts_series(dataset, mark_table, exp_window: Window, monitor_ends: list[dt.datetime],
                                monitor_start: dt.datetime | None = None) -> dict[int, list[tuple]]:
    """Per site, ``(end, |A_j|, |B_j,t|)`` for each monitor end ``t``."""
    if any(not a < b for a, b in zip(monitor_ends, monitor_ends[1:])):
        raise ValueError("monitor_ends must be strictly ascending")
    start = exp_window.start if monitor_start is None else monitor_start
    exposed, marks = exposed_entities(dataset, mark_table, exp_window)
    out = {}
    for site in sorted(exposed):
        a = exposed[site]
        mark_times = [marks[e] for e in a if e in marks and marks[e] >= start]
        # An end before the monitor start is an empty window.
        out[site] = [(t, len(a), sum(1 for m in mark_times if m <= t)) for t in monitor_ends]
    return out


def oracle_entity_spm_series(dataset, mark_table, exp_window: Window, monitor_ends: list[dt.datetime],
                             monitor_start: dt.datetime | None = None) -> dict[int, list[tuple[dt.datetime, float]]]:
    """``rho_{j,t} = |B_{j,t}| / |A_j|`` over nested monitor windows.

    All monitor windows start at ``monitor_start`` (default: the start of
    the exposure window) and end at successive ``monitor_ends``.
    """
    counts = oracle_entity_counts_series(dataset, mark_table, exp_window, monitor_ends, monitor_start)
    return {site: [(t, b / a) for t, a, b in pts] for site, pts in counts.items()}


def write_oracle_csv(path, scores: dict[int, SpmScore]) -> None:
    with open(path, "w") as fh:
        fh.write("site_id,a_size,b_size,rho\n")
        for site in sorted(scores):
            s = scores[site]
            fh.write(f"{site},{s.events},{s.marked},{s.rho:.6f}\n")


def write_oracle_series_csv(path, counts: dict[int, list[tuple]]) -> None:
    with open(path, "w") as fh:
        fh.write("site_id,monitor_end,a_size,b_size,rho\n")
        for site in sorted(counts):
            for t, a, b in counts[site]:
                fh.write(f"{site},{t.isoformat(sep=' ')},{a},{b},{b / a:.6f}\n")
