"""Generate a dataset, time MalStone A and B on every engine, print the tables.

    python3 scripts/run_benchmark.py --data-dir /tmp/desk --out results
    python3 scripts/run_benchmark.py --data-dir /tmp/small --nodes 2 --records-per-node 500000 --runs 1
"""
import argparse
import sys
from pathlib import Path

from malstone import engines
from malstone.cli import RunReport, main, render_text


def parse_args():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", default="results")
    p.add_argument("--preset", default="desk-10M")
    p.add_argument("--nodes", type=int)
    p.add_argument("--records-per-node", type=int)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--reducers", type=int, default=4)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--skip-generate", action="store_true")
    return p.parse_args()


def run(argv):
    code = main(argv)
    if code:
        sys.exit(code)


def main_script():
    args = parse_args()
    if not args.skip_generate:
        gen = ["generate", "--data-dir", args.data_dir, "--preset", args.preset, "--seed", str(args.seed),
               "--workers", str(args.workers)]
        if args.nodes:
            gen += ["--nodes", str(args.nodes)]
        if args.records_per_node:
            gen += ["--records-per-node", str(args.records_per_node)]
        run(gen)
    out = Path(args.out)
    for bench in "AB":
        for engine in engines.ENGINES:
            run(["run", "--data-dir", args.data_dir, "--benchmark", bench, "--engine", engine,
                 "--reducers", str(args.reducers), "--workers", str(args.workers),
                 "--runs", str(args.runs), "--out", str(out)])
    for bench in "AB":
        reports = [RunReport.load(out / f"malstone-{bench.lower()}-{e}-report.json") for e in engines.ENGINES]
        print()
        print(render_text(reports), end="")


if __name__ == "__main__":
    main_script()
