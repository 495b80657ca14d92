"""``malstone`` command line: generate, run, verify, report, oracle.

Exit codes: 0 success, 1 validation or verification failure, 2 I/O error or
infeasible configuration.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from malstone import engines, malgen, oracle, verify
from malstone.codec import RECORD_SIZE, Dataset
from malstone.model import GenConfig, Window, validate_config

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2

_DESK = dict(nodes=4, records_per_node=2_500_000, total_sites=200_000, marked_sites=2_000, entities=1_000_000)


def _cluster_preset(nodes: int) -> dict:
    # 500M records (50 GB) per node; sites and entities
    # scale with records the same way the desk preset does.
    records = nodes * 500_000_000
    return dict(nodes=nodes, records_per_node=500_000_000, total_sites=records // 50,
                marked_sites=records // 5000, entities=records // 10)


PRESETS = {
    "desk-10M": _DESK,
    "A-10": _cluster_preset(20), "B-10": _cluster_preset(20),
    "A-100": _cluster_preset(200), "B-100": _cluster_preset(200),
    "A-1000": _cluster_preset(2000), "B-1000": _cluster_preset(2000),
}
GUARDED_PRESETS = {p for p in PRESETS if p != "desk-10M"}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAIL):
        super().__init__(message)
        self.code = code


def format_duration(seconds: float) -> str:
    """Render seconds as ``Xm Y.YYs``."""
    m, s = divmod(seconds, 60.0)
    return f"{int(m)}m {s:.2f}s"


def human_bytes(n: int) -> str:
    for unit in ("B", "KB", "MB", "GB", "TB", "PB"):
        if n < 1000 or unit == "PB":
            return f"{n:g} {unit}" if unit == "B" else f"{n:.3g} {unit}"
        n /= 1000
    return str(n)


# --- reports ----------------------------------------------------------------

REPORT_COLUMNS = ["benchmark", "engine", "records", "bytes", "nodes", "reducers", "workers", "run_index", "seconds"]


@dataclass
class RunReport:
    benchmark: str
    engine: str
    records: int
    bytes: int
    nodes: int
    reducers: int
    workers: int
    durations: list[float]
    phases: list[dict] = field(default_factory=list)
    config: dict | None = None

    @property
    def average(self) -> float:
        return sum(self.durations) / len(self.durations)

    @property
    def descriptor(self) -> tuple:
        return (self.benchmark, self.records, self.bytes, self.nodes)

    def csv_rows(self) -> list[list]:
        base = [self.benchmark, self.engine, self.records, self.bytes, self.nodes, self.reducers, self.workers]
        rows = [base + [i + 1, repr(d)] for i, d in enumerate(self.durations)]
        rows.append(base + ["avg", repr(self.average)])
        return rows

    def write(self, stem: Path) -> tuple[Path, Path]:
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            w.writerows(self.csv_rows())
        d = asdict(self)
        d["average"] = self.average
        json_path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        return csv_path, json_path

    @classmethod
    def load(cls, path) -> "RunReport":
        path = Path(path)
        if path.suffix == ".json":
            d = json.loads(path.read_text())
            d.pop("average", None)
            return cls(**d)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: empty report")
        first = rows[0]
        runs = [r for r in rows if r["run_index"] != "avg"]
        return cls(first["benchmark"], first["engine"], int(first["records"]), int(first["bytes"]),
                   int(first["nodes"]), int(first["reducers"]), int(first["workers"]),
                   [float(r["seconds"]) for r in runs])


def comparison_table(reports: list[RunReport]) -> tuple[list[str], list[list]]:
    """Header and rows (Run 1..N, Average) with one column per report."""
    if not reports:
        raise ValueError("no reports to compare")
    ref = reports[0].descriptor
    for r in reports[1:]:
        if r.descriptor != ref:
            raise ValueError(f"cannot merge reports: {r.engine} ran on {r.descriptor}, "
                             f"{reports[0].engine} on {ref} (benchmark, records, bytes, nodes)")
    labels = [f"{r.engine} R={r.reducers} w={r.workers}" for r in reports]
    if len(set(labels)) == len(labels) and len({r.engine for r in reports}) == len(reports):
        labels = [r.engine for r in reports]
    n = max(len(r.durations) for r in reports)
    rows = []
    for i in range(n):
        rows.append([f"Run {i + 1}"] + [r.durations[i] if i < len(r.durations) else None for r in reports])
    rows.append(["Average"] + [r.average for r in reports])
    return labels, rows


def render_text(reports: list[RunReport]) -> str:
    labels, rows = comparison_table(reports)
    r0 = reports[0]
    title = (f"MalStone {r0.benchmark}: {r0.records:,} records, {human_bytes(r0.bytes)}, "
             f"{r0.nodes} nodes")
    cells = [[""] + labels] + [[row[0]] + ["" if v is None else format_duration(v) for v in row[1:]]
                               for row in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(cells[0]))]
    lines = [title]
    for c in cells:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(c, widths))))
    return "\n".join(lines) + "\n"


def render_csv(reports: list[RunReport]) -> str:
    labels, rows = comparison_table(reports)
    out = [",".join(["row"] + labels)]
    for row in rows:
        out.append(",".join([row[0]] + ["" if v is None else repr(v) for v in row[1:]]))
    return "\n".join(out) + "\n"


def parse_report_csv(text: str) -> dict[str, dict[str, float]]:
    """Inverse of :func:`render_csv`: label -> row name -> seconds."""
    rows = list(csv.reader(text.splitlines()))
    labels = rows[0][1:]
    out = {label: {} for label in labels}
    for row in rows[1:]:
        for label, v in zip(labels, row[1:]):
            if v:
                out[label][row[0]] = float(v)
    return out


# --- commands ---------------------------------------------------------------

def _config_from_args(args) -> GenConfig:
    base = dict(PRESETS[args.preset or "desk-10M"])
    overrides = {
        "nodes": args.nodes, "records_per_node": args.records_per_node, "total_sites": args.sites,
        "marked_sites": args.marked_sites, "entities": args.entities, "period_days": args.days,
        "p_mark": args.p_mark, "delay_days": args.delay_days, "alpha": args.alpha,
        "events_min": args.events_min, "events_max": args.events_max,
        "background_mark_rate": args.background_mark_rate,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.start is not None:
        base["period_start"] = dt.date.fromisoformat(args.start)
    return GenConfig(master_seed=args.seed, **base)


def cmd_generate(args) -> int:
    cfg = _config_from_args(args)
    if args.preset in GUARDED_PRESETS and not args.force:
        raise CliError(
            f"preset {args.preset} means {cfg.total_records:,} records "
            f"({human_bytes(cfg.total_records * RECORD_SIZE)}); refusing without --force"
        )
    problems = validate_config(cfg)
    if problems:
        raise CliError("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))
    summary = malgen.generate_dataset(cfg, args.data_dir, workers=args.workers)
    secs = summary["seconds"]
    print(f"records: {summary['records']:,}")
    print(f"bytes:   {summary['bytes']:,} ({human_bytes(summary['bytes'])})")
    print(f"marked-site events: {summary['marked_events']:,}; marked entities: {summary['marked_entities']:,}")
    for phase in ("seed", "scatter", "local"):
        print(f"{phase:8s} {format_duration(secs[phase])}")
    total = sum(secs.values())
    print(f"total    {format_duration(total)} ({summary['records'] / max(total, 1e-9):,.0f} records/s)")
    return EXIT_OK


def cmd_run(args) -> int:
    ds = Dataset.open(args.data_dir)
    records = ds.record_count()
    nodes = len({p.node_index for p in ds.partitions})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"malstone-{args.benchmark.lower()}-{args.engine}"
    durations, phases = [], []
    first = None
    digest = None
    for i in range(args.runs):
        res = engines.run_benchmark(args.benchmark, ds, args.engine, args.reducers, args.workers)
        body = res.csv_bytes()
        h = hashlib.sha256(body).hexdigest()
        if digest is None:
            digest, first = h, body
        elif h != digest:
            raise CliError(f"run {i + 1} produced different output than run 1 (nondeterminism detected)")
        durations.append(res.timing["total"])
        phases.append(res.timing)
        print(f"run {i + 1}: {format_duration(res.timing['total'])}  "
              + " ".join(f"{k}={v:.2f}s" for k, v in res.timing.items() if k != "total"))
    (out / f"{stem}.csv").write_bytes(first)
    report = RunReport(args.benchmark, args.engine, records, records * RECORD_SIZE, nodes,
                       args.reducers, args.workers, durations, phases,
                       ds.manifest["config"] if ds.manifest else None)
    csv_path, json_path = report.write(out / f"{stem}-report")
    print(f"average: {format_duration(report.average)}")
    print(f"result: {out / f'{stem}.csv'}\nreport: {csv_path}, {json_path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = verify.run_checks(args.data_dir, with_ground_truth=args.with_ground_truth,
                               samples=args.samples, subset_records=args.subset_records,
                               workers=args.workers)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.ok]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_report(args) -> int:
    reports = [RunReport.load(p) for p in args.inputs]
    try:
        text = render_text(reports) if args.format == "text" else render_csv(reports)
    except ValueError as e:
        raise CliError(str(e))
    sys.stdout.write(text)
    return EXIT_OK


def _parse_ts(s: str) -> dt.datetime:
    return dt.datetime.fromisoformat(s)


def cmd_oracle(args) -> int:
    seed = malgen.load_seed(args.data_dir)
    cfg = seed.config
    start = dt.datetime.combine(cfg.period_start, dt.time())
    end = start + dt.timedelta(days=cfg.period_days + cfg.delay_days)
    exp = Window(_parse_ts(args.exp_start) if args.exp_start else start,
                 _parse_ts(args.exp_end) if args.exp_end else end)
    if args.weekly:
        ends = []
        t = exp.start + dt.timedelta(weeks=1)
        while t <= end:
            ends.append(t)
            t += dt.timedelta(weeks=1)
        counts = oracle.oracle_entity_counts_series(args.data_dir, seed.mark_table, exp, ends)
        oracle.write_oracle_series_csv(args.out, counts)
        print(f"{len(counts)} sites, {len(ends)} monitor windows -> {args.out}")
    else:
        mon = Window(_parse_ts(args.mon_start) if args.mon_start else start,
                     _parse_ts(args.mon_end) if args.mon_end else end)
        scores = oracle.oracle_entity_spm(args.data_dir, seed.mark_table, exp, mon)
        oracle.write_oracle_csv(args.out, scores)
        print(f"{len(scores)} sites -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="malstone", description="MalStone benchmark kit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    default_dir = os.environ.get("MALSTONE_DATA_DIR")

    def data_dir(sp):
        sp.add_argument("--data-dir", default=default_dir, required=default_dir is None,
                        help="dataset root (default: $MALSTONE_DATA_DIR)")

    g = sub.add_parser("generate", help="generate a dataset")
    data_dir(g)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--force", action="store_true", help="allow the terabyte-scale presets")
    g.add_argument("--nodes", type=int)
    g.add_argument("--records-per-node", type=int)
    g.add_argument("--sites", type=int)
    g.add_argument("--marked-sites", type=int)
    g.add_argument("--entities", type=int)
    g.add_argument("--days", type=int)
    g.add_argument("--start", help="period start date, YYYY-MM-DD (default 2009-01-01)")
    g.add_argument("--p-mark", type=float)
    g.add_argument("--delay-days", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--events-min", type=int)
    g.add_argument("--events-max", type=int)
    g.add_argument("--background-mark-rate", type=float)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="time a benchmark on a dataset")
    data_dir(r)
    r.add_argument("--benchmark", choices=("A", "B"), required=True)
    r.add_argument("--engine", choices=engines.ENGINES, default="mapreduce")
    r.add_argument("--reducers", type=int, default=4)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--runs", type=int, default=3)
    r.add_argument("--out", default="results")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="check a dataset's properties")
    data_dir(v)
    v.add_argument("--with-ground-truth", action="store_true", help="also check flags against seed/marks.tsv")
    v.add_argument("--samples", type=int, default=10_000, help="records sampled for the codec check")
    v.add_argument("--subset-records", type=int, default=100_000,
                   help="records per partition used for the cross-engine check")
    v.add_argument("--workers", type=int, default=1)
    v.set_defaults(func=cmd_verify)

    rep = sub.add_parser("report", help="compare run reports side by side")
    rep.add_argument("--inputs", nargs="+", required=True)
    rep.add_argument("--format", choices=("text", "csv"), default="text")
    rep.set_defaults(func=cmd_report)

    o = sub.add_parser("oracle", help="entity-set SPM from the ground-truth mark table")
    data_dir(o)
    o.add_argument("--out", required=True)
    o.add_argument("--exp-start")
    o.add_argument("--exp-end")
    o.add_argument("--mon-start")
    o.add_argument("--mon-end")
    o.add_argument("--weekly", action="store_true", help="nested weekly monitor windows (rho_{j,t})")
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "runs", 1) < 1 or getattr(args, "workers", 1) < 1 or getattr(args, "reducers", 1) < 1:
        print("error: --runs, --workers and --reducers must be at least 1", file=sys.stderr)
        return EXIT_FAIL
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except malgen.ConfigInfeasible as e:
        print(f"error: infeasible configuration: {e}", file=sys.stderr)
        return EXIT_IO
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
