"""Compare per-site rho from MalStone A with the entity-set oracle.

Generates a small dataset, runs MalStone A and the oracle over the whole
period, and prints how the two rankings of marked sites line up.

    python3 scripts/spm_curves.py --data-dir /tmp/spm
"""
import argparse
import datetime as dt

import numpy as np

from malstone import engines, malgen
from malstone.model import GenConfig, Window
from malstone.oracle import oracle_entity_spm


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--top", type=int, default=10)
    args = p.parse_args()

    cfg = GenConfig(nodes=2, records_per_node=200_000, total_sites=8_000, marked_sites=100, entities=50_000,
                    master_seed=args.seed)
    malgen.generate_dataset(cfg, args.data_dir)
    a = engines.run_malstone_a(args.data_dir).scores()
    start = dt.datetime.combine(cfg.period_start, dt.time())
    end = start + dt.timedelta(days=cfg.period_days + cfg.delay_days)
    truth = oracle_entity_spm(args.data_dir, malgen.load_seed(args.data_dir).mark_table,
                              Window(start, end), Window(start, end))

    common = sorted(set(a) & set(truth))
    x = np.array([a[s].rho for s in common])
    y = np.array([truth[s].rho for s in common])
    print(f"{len(common)} sites; corr(event rho, entity rho) = {np.corrcoef(x, y)[0, 1]:.3f}")
    marked = [s for s in common if s < cfg.marked_sites]
    print(f"mean rho on marked sites: events {x[:len(marked)].mean():.3f}, entities {y[:len(marked)].mean():.3f}")
    print(f"mean rho on other sites:  events {x[len(marked):].mean():.3f}, entities {y[len(marked):].mean():.3f}")
    print(f"\ntop {args.top} sites by entity rho:")
    print("site      events_rho  entity_rho  |A|")
    for s in sorted(common, key=lambda s: -truth[s].rho)[:args.top]:
        print(f"{s:<9d} {a[s].rho:10.4f}  {truth[s].rho:10.4f}  {truth[s].events}")


if __name__ == "__main__":
    main()
