"""Command-line entry point: ``ecosafe <command> [options]``.

Exit codes: 0 success, 1 bad input or domain error, 2 infeasible safety configuration.
The default output directory comes from ``ECOSAFE_OUTPUT_DIR`` (else ``./runs``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness as hz
from .config import METHODS, RunConfig, full_scale
from .convex_sets import TighteningInfeasible
from .core_model import DomainError
from .safety_filter import TerminalSetEmpty
from .td3 import CheckpointError, load_checkpoint, save_checkpoint

log = logging.getLogger("ecosafe")

EXIT_OK, EXIT_DOMAIN, EXIT_INFEASIBLE = 0, 1, 2
OUTPUT_ENV = "ECOSAFE_OUTPUT_DIR"


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV, "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = RunConfig.from_ini(Path(args.config).read_text())
    if getattr(args, "full_scale", False):
        cfg = full_scale(cfg)
    sets = list(args.set or [])
    for opt, key in (("scenario", "run.scenario"), ("mode", "run.mode"), ("episodes", "run.episodes"),
                     ("seed", "run.seed")):
        val = getattr(args, opt, None)
        if val is not None:
            sets.append(f"{key}={val}")
    return cfg.with_overrides(sets)


def _header(cfg: RunConfig, command: str, **extra) -> list[str]:
    return cfg.header_lines(command=command, seed=cfg.run.seed, **extra)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    every = cfg.run.checkpoint_every

    def periodic(ep, agent):
        if every > 0 and (ep + 1) % every == 0:
            save_checkpoint(agent, out / f"checkpoint_ep{ep + 1:05d}.json",
                            {"method": cfg.run.mode, "episode": ep + 1})

    res = hz.train(cfg, checkpoint_cb=periodic)
    save_checkpoint(res.agent, out / "checkpoint.json",
                    {"method": cfg.run.mode, "episode": cfg.run.episodes})
    hz.write_csv(out / "train_log.csv", res.rows, _header(cfg, "train"), hz.TRAIN_COLUMNS)
    print(f"trained {cfg.run.episodes} episodes ({cfg.run.mode}, scenario {cfg.run.scenario}); "
          f"collisions={res.collisions}; wrote {out}")
    return EXIT_OK


def _agent_for(cfg: RunConfig, path, scenario: str):
    if not path:
        return None
    dim = {"B": 3, "C": 5}.get(scenario)
    return load_checkpoint(path, expected_state_dim=dim)


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    method = cfg.run.mode
    scen = cfg.run.scenario
    agent = _agent_for(cfg, args.checkpoint, scen)
    if method != "rmpc-only" and scen != "A" and agent is None:
        raise ValueError(f"--checkpoint is required to evaluate {method}")
    rows, results = hz.evaluate(cfg, method, agent, keep_results=True)
    head = _header(cfg, "evaluate", checkpoint=args.checkpoint or "")
    hz.write_csv(out / "cases.csv", rows, head, hz.CASE_COLUMNS)
    summ = hz.summarize(rows)
    hz.write_csv(out / "summary.csv", [{"method": rows[0]["method"], "scenario": scen, **summ}], head)
    tr = []
    for res, row in zip(results, rows):
        if row["seed"] == cfg.run.seeds[0] and row["case"] == _trace_case(cfg):
            tr = hz.trace_rows(res, row["method"], row["case"])
    hz.write_csv(out / "traces.csv", tr, head, hz.TRACE_COLUMNS)
    print(json.dumps({"method": rows[0]["method"], **summ}))
    return EXIT_OK


def _trace_case(cfg: RunConfig) -> int:
    # the sweep case closest to T = 1.2 s gets full per-step traces
    return int(np.argmin(np.abs(hz.sweep_preferences(cfg) - 1.2)))


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    agents = {}
    if args.safe_checkpoint:
        agents["safe-rl"] = _agent_for(cfg, args.safe_checkpoint, cfg.run.scenario)
    if args.raw_checkpoint:
        agents["raw-rl"] = _agent_for(cfg, args.raw_checkpoint, cfg.run.scenario)
    scen_agents = None
    if args.scenario_b_checkpoint:
        scen_agents = {"B": _agent_for(cfg, args.scenario_b_checkpoint, "B")}
        if "safe-rl" in agents:
            scen_agents["C"] = agents["safe-rl"]
    report, rows = hz.compare(cfg, agents, scen_agents)
    head = _header(cfg, "compare")
    hz.write_csv(out / "comparison_cases.csv", rows, head, hz.CASE_COLUMNS)
    hz.write_csv(out / "comparison.csv", report.rows(), head)
    if "safe-rl" in report.methods:
        print(f"safe-rl vs rmpc-only mean holistic improvement: {100 * report.improvement():.2f}%")
    for k, v in report.methods.items():
        print(f"{k:10s} least={v['least']:.2f} mean={v['mean']:.2f} most={v['most']:.2f} "
              f"collisions={v['collisions']} violations={v['violations']}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    paths = [Path(p) for p in args.trajectories]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError("missing trajectory files: " + ", ".join(missing))
    hist, est, skipped, failed = hz.calibrate(paths, cfg.model.tau, cfg.idm, args.bins)
    target = Path(args.output) if args.output else out / "preferences.json"
    target.write_text(json.dumps(hist, indent=1))
    hz.write_csv(out / "calibration.csv",
                 [{"file": str(p), "T_hat": t} for p, t in zip(paths, est)] if len(est) == len(paths) else
                 [{"file": "", "T_hat": t} for t in est],
                 _header(cfg, "calibrate", skipped_rows=skipped, failed_cases=failed), ("file", "T_hat"))
    if skipped:
        log.warning("skipped %d malformed rows", skipped)
    print(f"calibrated {len(est)} cases ({failed} failed, {skipped} rows skipped) -> {target}")
    return EXIT_OK if est else EXIT_DOMAIN


def cmd_mrpi_report(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    rep = hz.rmpc_report(hz.rmpc_config(cfg))
    rep["config"] = cfg.to_ini()
    (out / "mrpi.json").write_text(json.dumps(rep, indent=1))
    rows = [{"item": "Z_vertex", "a": v[0], "b": v[1], "c": ""} for v in rep["Z_vertices"]]
    rows += [{"item": "Xbar_row", "a": f[0], "b": f[1], "c": g}
             for f, g in zip(rep["Xbar"]["F"], rep["Xbar"]["g"])]
    rows += [{"item": "Xf_row", "a": f[0], "b": f[1], "c": g} for f, g in zip(rep["Xf"]["F"], rep["Xf"]["g"])]
    rows += [{"item": "K", "a": rep["K"][0], "b": rep["K"][1], "c": ""},
             {"item": "Ubar", "a": rep["Ubar"][0], "b": rep["Ubar"][1], "c": ""}]
    rows += [{"item": "margin:" + k, "a": v, "b": "", "c": ""} for k, v in rep["margins"].items()]
    hz.write_csv(out / "mrpi.csv", rows, _header(cfg, "mrpi-report"), ("item", "a", "b", "c"))
    worst = min(rep["margins"].values())
    print(f"K={rep['K']} |Z|={len(rep['Z_vertices'])} vertices, worst margin {worst:.3g}")
    return EXIT_OK


PLOT_INPUTS = ("traces.csv", "cases.csv")


def cmd_plot_data(args) -> int:
    runs = [Path(r) for r in args.runs]
    absent = [str(r / f) for r in runs for f in PLOT_INPUTS if not (r / f).exists()]
    train_logs = [r / "train_log.csv" for r in runs if (r / "train_log.csv").exists()]
    if absent:
        raise FileNotFoundError("missing run artifacts: " + ", ".join(absent))
    out = _out_dir(args)
    traces, cases = [], []
    for r in runs:
        traces += hz.read_csv(r / "traces.csv")
        cases += hz.read_csv(r / "cases.csv")
    head = [f"# source = {r}" for r in runs]
    hz.write_csv(out / "tube.csv", [t for t in traces if t.get("x1")], head,
                 ("method", "step", "x1", "x2", "xbar1", "xbar2", "x1_min", "x2_min", "x2_max"))
    # constraint lines as constant columns
    cfg = RunConfig()
    rows = hz.read_csv(out / "tube.csv")
    for row in rows:
        row.update({"x1_min": -cfg.constraints.x1_min, "x2_min": -cfg.constraints.x2_min,
                    "x2_max": cfg.constraints.x2_max})
    hz.write_csv(out / "tube.csv", rows, head,
                 ("method", "step", "x1", "x2", "xbar1", "xbar2", "x1_min", "x2_min", "x2_max"))
    hz.write_csv(out / "velocity.csv", traces, head, ("step", "v_p", "v_c", "v_h", "method"))
    hz.write_csv(out / "inputs.csv", [t for t in traces if t.get("u_s")], head,
                 ("step", "u_L", "u_s", "method"))
    hz.write_csv(out / "energy.csv", cases, head,
                 ("method", "scenario", "case", "seed", "T_true", "cav_kj_per_km", "hdv_kj_per_km",
                  "holistic_kj_per_km"))
    rew = []
    for path in train_logs:
        for row in hz.read_csv(path):
            rew.append({"run": str(path.parent), "episode": row["episode"], "return": row["return"],
                        "collisions": row["collisions"]})
    hz.write_csv(out / "rewards.csv", rew, head, ("run", "episode", "return", "collisions"))
    print(f"wrote tube/velocity/inputs/energy/rewards CSVs to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ecosafe", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, run_opts=True):
        p.add_argument("--config", help="INI file with [model] [constraints] ... [run] sections")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a value")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./runs)")
        if run_opts:
            p.add_argument("--scenario", choices=("A", "B", "C"))
            p.add_argument("--mode", choices=METHODS)
            p.add_argument("--episodes", type=int)
            p.add_argument("--seed", type=int)
            p.add_argument("--full-scale", action="store_true",
                           help="N=50, 5000 episodes, 100 preferences")
        return p

    p = common(sub.add_parser("train", help="train a TD3 agent"))
    p.set_defaults(func=cmd_train)
    p = common(sub.add_parser("evaluate", help="preference sweep with a frozen policy"))
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_evaluate)
    p = common(sub.add_parser("compare", help="paired sweep of rmpc-only / raw-rl / safe-rl"))
    p.add_argument("--safe-checkpoint")
    p.add_argument("--raw-checkpoint")
    p.add_argument("--scenario-b-checkpoint", help="adds the A/B/C HDV-energy comparison")
    p.set_defaults(func=cmd_compare)
    p = common(sub.add_parser("calibrate", help="fit IDM headways to following trajectories"), False)
    p.add_argument("trajectories", nargs="*", help="CSV files with t,v_leader,v_follower,gap")
    p.add_argument("--bins", type=int, default=25)
    p.add_argument("--output", help="preference JSON path (default OUT/preferences.json)")
    p.set_defaults(func=cmd_calibrate)
    p = common(sub.add_parser("mrpi-report", help="emit gain, tube, tightened and terminal sets"), False)
    p.set_defaults(func=cmd_mrpi_report)
    p = sub.add_parser("plot-data", help="tidy CSVs for figures from evaluate/train outputs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TighteningInfeasible, TerminalSetEmpty) as e:
        row = getattr(e, "row", None)
        print(f"infeasible safety configuration: {e}" + (f" (row {row})" if row is not None else ""),
              file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DomainError, CheckpointError, ValueError, FileNotFoundError, hz.GradientGateFailed) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
