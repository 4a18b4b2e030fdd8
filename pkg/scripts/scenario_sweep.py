"""HDV energy with no CAV (A), a CAV blind to the HDV (B) and an HDV-aware CAV (C).

Trains one filtered agent per learning scenario and evaluates all three on
the same preference sweep and seeds.
"""
import argparse
from pathlib import Path

from ecosafe import harness as hz
from ecosafe.config import RunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/scenarios")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--episodes", type=int, default=None)
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = ap.parse_args()

    cfg = RunConfig().with_overrides(args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    agents = {s: hz.train(cfg, "safe-rl", s, seed=args.seed, episodes=args.episodes).agent
              for s in ("B", "C")}
    report, rows = hz.compare(cfg, {"safe-rl": agents["C"]}, agents)
    head = cfg.header_lines(seed=args.seed)
    hz.write_csv(out / "scenario_cases.csv", rows, head, hz.CASE_COLUMNS)
    hz.write_csv(out / "scenario_summary.csv", report.rows(), head)
    for s, v in report.scenarios.items():
        print(f"scenario {s}: HDV mean {v['hdv_mean']:.1f} kJ/km, holistic mean {v['holistic_mean']:.1f} kJ/km")


if __name__ == "__main__":
    main()
