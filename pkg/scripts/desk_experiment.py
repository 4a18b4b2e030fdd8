"""Train safe-rl and raw-rl agents, then run the paired method comparison.

Writes checkpoints, training logs, per-case rows and the comparison table
under --out.  Defaults are the desk-scale values of RunConfig.
"""
import argparse
import time
from pathlib import Path

from ecosafe import harness as hz
from ecosafe.config import RunConfig
from ecosafe.td3 import save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seeds", default="0", help="comma-separated training seeds")
    ap.add_argument("--episodes", type=int, default=None)
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = ap.parse_args()

    cfg = RunConfig().with_overrides(args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in (int(s) for s in args.seeds.split(",")):
        agents = {}
        for method in ("safe-rl", "raw-rl"):
            t0 = time.perf_counter()
            run = hz.train(cfg, method, seed=seed, episodes=args.episodes)
            tag = f"{method}_seed{seed}"
            save_checkpoint(run.agent, out / f"{tag}.json", {"method": method, "seed": seed})
            hz.write_csv(out / f"{tag}_train_log.csv", run.rows, cfg.header_lines(seed=seed),
                         hz.TRAIN_COLUMNS)
            print(f"{tag}: {len(run.rows)} episodes, {run.collisions} collisions, "
                  f"{time.perf_counter() - t0:.0f} s")
            agents[method] = run.agent
        report, rows = hz.compare(cfg, agents)
        head = cfg.header_lines(seed=seed)
        hz.write_csv(out / f"comparison_seed{seed}.csv", report.rows(), head)
        hz.write_csv(out / f"comparison_cases_seed{seed}.csv", rows, head, hz.CASE_COLUMNS)
        for name, s in report.methods.items():
            print(f"  {name:10s} mean {s['mean']:.1f} kJ/km  collisions {s['collisions']}")
        print(f"  safe-rl improvement over rmpc-only: {100 * report.improvement():.2f}%")


if __name__ == "__main__":
    main()
