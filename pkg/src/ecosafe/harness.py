"""Training, evaluation sweeps, method comparison, calibration and artifact writing."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .config import ENV_MODE, RunConfig
from .core_model import ModelParams, VehicleState, truncated_normal
from .driver import (T_BOUNDS, IdmParams, PreferenceDistribution, fit_headway, idm_accel,
                     sample_preference, step_hdv)
from .env import (TEST_INIT, TRAIN_INIT, EcoDrivingEnv, EpisodeResult, PvProfile, ScenarioConfig,
                  load_profile_csv, substream, synthetic_profile)
from .numerics import EstimationFailed
from .safety_filter import MpcWeights, RmpcConfig, build_config, verify_config
from .td3 import ReplayBuffer, Td3Agent, gradient_check

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 100_000  # evaluation streams never overlap training streams


class GradientGateFailed(RuntimeError):
    pass


# ---------------------------------------------------------------- building blocks

@lru_cache(maxsize=16)
def _rmpc_cached(model, constraints, disturbance, N, q1, q2, R, Rl, eps, backoff) -> RmpcConfig:
    w = MpcWeights(N=N, Q=((q1, 0.0), (0.0, q2)), R=R, Rl=Rl)
    return build_config(constraints, disturbance, model, w, eps=eps, backoff=backoff)


def rmpc_config(cfg: RunConfig) -> RmpcConfig:
    m = cfg.mpc
    return _rmpc_cached(cfg.model, cfg.constraints, cfg.disturbance, m.N, m.q1, m.q2, m.R, m.Rl,
                        m.mrpi_eps, m.backoff)


def scenario_config(cfg: RunConfig, scenario: str | None = None, test: bool = False) -> ScenarioConfig:
    r = cfg.run
    return ScenarioConfig(scenario or r.scenario, r.n_steps, TEST_INIT if test else TRAIN_INIT,
                          r.reward_action, r.collision_gap)


def make_env(cfg: RunConfig, method: str, scenario: str | None = None, test: bool = False) -> EcoDrivingEnv:
    sc = scenario_config(cfg, scenario, test)
    mode = ENV_MODE[method]
    rmpc = rmpc_config(cfg) if (sc.scenario != "A" and mode != "raw") else None
    return EcoDrivingEnv(sc, mode, rmpc, cfg.disturbance, cfg.model, cfg.constraints, cfg.idm,
                         cfg.reward, n_hold=cfg.mpc.n_hold)


def preference_distribution(cfg: RunConfig) -> PreferenceDistribution:
    if cfg.run.preference_file:
        return PreferenceDistribution.from_json(cfg.run.preference_file)
    return PreferenceDistribution.uniform_grid(cfg.run.T_lo, cfg.run.T_hi, 100)


def sweep_preferences(cfg: RunConfig) -> np.ndarray:
    return np.linspace(cfg.run.T_lo, cfg.run.T_hi, cfg.run.n_preferences)


def _profiles(cfg: RunConfig) -> list[PvProfile]:
    if not cfg.run.profile_dir:
        return []
    paths = sorted(Path(cfg.run.profile_dir).glob("*.csv"))
    if not paths:
        raise FileNotFoundError(f"no *.csv profiles in {cfg.run.profile_dir}")
    return [load_profile_csv(p, cfg.model.tau) for p in paths]


def gradient_gate(agent: Td3Agent, tol: float = 1e-4, seed: int = 0) -> dict[str, float]:
    """Finite-difference check of every network shape; raises when any exceeds ``tol``."""
    rng = np.random.default_rng(seed)
    errs = {}
    for name, net in (("policy", agent.policy), ("q", agent.q1)):
        x = rng.normal(size=(8, net.in_dim))
        target = rng.normal(size=(8, 1))

        def loss(out, target=target):
            d = out - target
            return float(0.5 * np.sum(d * d)), d

        errs[name] = gradient_check(net, loss, x, n_weights=200, rng=rng)
    bad = {k: v for k, v in errs.items() if not v <= tol}
    if bad:
        raise GradientGateFailed(f"gradient check failed: {bad}")
    return errs


# ---------------------------------------------------------------- training

TRAIN_COLUMNS = ("episode", "T_true", "return", "steps", "collisions", "violations", "qp_failures",
                 "cav_kj_per_km", "hdv_kj_per_km", "holistic_kj_per_km", "T_hat")


@dataclass
class TrainOutcome:
    agent: Td3Agent
    rows: list[dict]
    results: list[EpisodeResult] = field(default_factory=list, repr=False)

    @property
    def collisions(self) -> int:
        return int(sum(r["collisions"] for r in self.rows))


def train(cfg: RunConfig, method: str | None = None, scenario: str | None = None,
          seed: int | None = None, episodes: int | None = None, checkpoint_cb=None,
          keep_results: bool = False, gate: bool = True) -> TrainOutcome:
    method = method or cfg.run.mode
    if method == "rmpc-only":
        raise ValueError("rmpc-only has nothing to train")
    scenario = scenario or cfg.run.scenario
    if scenario == "A":
        raise ValueError("scenario A has no learning agent")
    seed = cfg.run.seed if seed is None else seed
    episodes = cfg.run.episodes if episodes is None else episodes
    env = make_env(cfg, method, scenario)
    agent = Td3Agent(env.sc.state_dim, cfg.td3, seed=seed, scenario=scenario)
    if gate:
        gradient_gate(agent, cfg.run.gradient_tol, seed)
    buf = ReplayBuffer(cfg.td3.buffer_capacity, env.sc.state_dim)
    rng = substream(seed, "agent")
    dist = preference_distribution(cfg)
    profiles = _profiles(cfg)
    rows, results = [], []
    for ep in range(episodes):
        T = sample_preference(dist, substream(seed, "preference", ep))
        prof = profiles[ep % len(profiles)] if profiles else None
        obs = env.reset(seed, T, prof, episode=ep)
        while not env.done:
            u = agent.act_with_exploration(obs, ep, rng)
            nxt, r, done, info = env.step(u)
            # time-limit ends still bootstrap; only collisions are terminal
            buf.push(obs, info["u_L"], r, nxt, info["collision"])
            agent.update(buf, rng)
            obs = nxt
        res = env.result()
        rows.append(_train_row(ep, res))
        if keep_results:
            results.append(res)
        if checkpoint_cb is not None:
            checkpoint_cb(ep, agent)
    return TrainOutcome(agent, rows, results)


def _train_row(ep: int, res: EpisodeResult) -> dict:
    return {"episode": ep, "T_true": res.T_true, "return": res.episode_return, "steps": res.steps,
            "collisions": int(res.collision), "violations": res.violations,
            "qp_failures": res.qp_failures, "cav_kj_per_km": res.cav_kj_per_km,
            "hdv_kj_per_km": res.hdv_kj_per_km, "holistic_kj_per_km": res.holistic_kj_per_km,
            "T_hat": res.T_hat}


# ---------------------------------------------------------------- evaluation

CASE_COLUMNS = ("method", "scenario", "case", "seed", "T_true", "T_hat", "steps", "collision",
                "violations", "qp_failures", "tube_min_margin", "cav_kj_per_km", "hdv_kj_per_km",
                "holistic_kj_per_km", "return")


def evaluate(cfg: RunConfig, method: str, agent: Td3Agent | None = None, scenario: str | None = None,
             prefs=None, seeds=None, keep_results: bool = False):
    """Frozen-policy sweep over preferences x seeds; paired across methods by (case, seed)."""
    scenario = scenario or cfg.run.scenario
    if method != "rmpc-only" and scenario != "A" and agent is None:
        raise ValueError(f"{method} evaluation needs a trained agent")
    env = make_env(cfg, method if scenario != "A" else "raw-rl", scenario, test=True)
    if agent is not None and scenario != "A" and agent.state_dim != env.sc.state_dim:
        raise ValueError(f"checkpoint is for {agent.state_dim} inputs (scenario {agent.scenario}) "
                         f"but scenario {scenario} provides {env.sc.state_dim}")
    prefs = sweep_preferences(cfg) if prefs is None else np.asarray(prefs, dtype=float)
    seeds = cfg.run.seeds if seeds is None else list(seeds)
    profiles = _profiles(cfg)
    policy = None if agent is None else agent.act
    label = "hdv-only" if scenario == "A" else method
    rows, results = [], []
    for seed in seeds:
        for case, T in enumerate(prefs):
            prof = profiles[case % len(profiles)] if profiles else None
            obs = env.reset(EVAL_SEED_OFFSET + seed, float(T), prof, episode=case)
            while not env.done:
                u = 0.0 if (policy is None or env.cav is None) else policy(obs)
                obs, _, _, _ = env.step(u)
            res = env.result()
            rows.append({"method": label, "scenario": scenario, "case": case, "seed": seed,
                         "T_true": float(T), "T_hat": res.T_hat, "steps": res.steps,
                         "collision": int(res.collision), "violations": res.violations,
                         "qp_failures": res.qp_failures, "tube_min_margin": res.tube_min_margin,
                         "cav_kj_per_km": res.cav_kj_per_km, "hdv_kj_per_km": res.hdv_kj_per_km,
                         "holistic_kj_per_km": res.holistic_kj_per_km,
                         "return": res.episode_return})
            if keep_results:
                results.append(res)
    return (rows, results) if keep_results else rows


def summarize(rows: list[dict], key: str = "holistic_kj_per_km") -> dict:
    vals = np.array([r[key] for r in rows], dtype=float)
    vals = vals[np.isfinite(vals)]
    return {"n": int(len(vals)), "least": float(vals.min()) if len(vals) else math.nan,
            "most": float(vals.max()) if len(vals) else math.nan,
            "mean": float(vals.mean()) if len(vals) else math.nan,
            "collisions": int(sum(r.get("collision", 0) for r in rows)),
            "violations": int(sum(r.get("violations", 0) for r in rows))}


@dataclass
class ComparisonReport:
    methods: dict[str, dict]
    scenarios: dict[str, dict] = field(default_factory=dict)

    def improvement(self, base: str = "rmpc-only", other: str = "safe-rl") -> float:
        b, o = self.methods[base]["mean"], self.methods[other]["mean"]
        return (b - o) / b

    def rows(self) -> list[dict]:
        out = [{"group": "method", "name": k, **v} for k, v in self.methods.items()]
        out += [{"group": "scenario-hdv", "name": k, **v} for k, v in self.scenarios.items()]
        return out


def compare(cfg: RunConfig, agents: dict[str, Td3Agent], scenario_agents: dict[str, Td3Agent] | None = None):
    """Paired sweep of every available method plus optional A/B/C HDV-energy comparison."""
    all_rows = []
    methods = {}
    for method in ("rmpc-only", "raw-rl", "safe-rl"):
        if method != "rmpc-only" and method not in agents:
            continue
        rows = evaluate(cfg, method, agents.get(method))
        all_rows += rows
        methods[method] = summarize(rows)
    scen = {}
    if scenario_agents:
        for s in ("A", "B", "C"):
            if s != "A" and s not in scenario_agents:
                continue
            rows = evaluate(cfg, "safe-rl", scenario_agents.get(s), scenario=s)
            all_rows += rows
            scen[s] = {"hdv": summarize(rows, "hdv_kj_per_km"), "holistic": summarize(rows)}
    flat = {k: {"hdv_" + a: b for a, b in v["hdv"].items()} | {"holistic_" + a: b for a, b in v["holistic"].items()}
            for k, v in scen.items()}
    return ComparisonReport(methods, flat), all_rows


# ---------------------------------------------------------------- calibration

def synthesize_following_case(T: float, rng: np.random.Generator, n_steps: int = 300,
                              tau: float = 0.5, idm: IdmParams = IdmParams(), n_h: float = 0.0,
                              sigma: float = 0.1) -> list[dict]:
    """Leader on a synthetic profile, IDM follower with headway ``T``; rows t,v_leader,v_follower,gap."""
    prof = synthetic_profile(rng, n_steps, tau)
    p = idm.with_T(T)
    model = ModelParams(tau=tau)
    lead = VehicleState(0.0, prof.v[0])
    v0 = prof.v[0]
    s_eq = (p.s0 + T * v0) / math.sqrt(max(1.0 - (v0 / p.v_d) ** p.delta0, 1e-6))
    fol = VehicleState(-s_eq, v0)
    rows = []
    for k in range(n_steps):
        gap = lead.s - fol.s
        rows.append({"t": k * tau, "v_leader": lead.v, "v_follower": fol.v, "gap": gap})
        a = idm_accel(p, fol.v, fol.v - lead.v, gap)
        da = truncated_normal(rng, sigma, n_h) if n_h > 0 else 0.0
        lead = VehicleState(lead.s + tau * lead.v + 0.5 * tau**2 * prof.a[k], prof.v[k + 1])
        fol = step_hdv(fol, a, da, model)
    return rows


def read_following_csv(path) -> tuple[np.ndarray, int]:
    """Rows of (v_follower, v_leader, gap); returns samples and the count of skipped rows."""
    good, skipped = [], 0
    with open(path, newline="") as fh:
        reader = csv.DictReader(r for r in fh if not r.startswith("#"))
        need = {"t", "v_leader", "v_follower", "gap"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain {sorted(need)}")
        for row in reader:
            try:
                vals = [float(row[k]) for k in ("v_follower", "v_leader", "gap")]
            except (TypeError, ValueError):
                skipped += 1
                continue
            if not all(map(math.isfinite, vals)):
                skipped += 1
                continue
            good.append(vals)
    return np.array(good).reshape(-1, 3), skipped


def calibrate_case(samples: np.ndarray, tau: float = 0.5, idm: IdmParams = IdmParams()) -> float:
    return fit_headway(samples, tau, idm)


def calibrate(paths, tau: float = 0.5, idm: IdmParams = IdmParams(), bins: int = 25):
    """Fit T for each trajectory file and histogram the estimates on the admissible range."""
    estimates, skipped, failed = [], 0, 0
    for path in paths:
        samples, sk = read_following_csv(path)
        skipped += sk
        if len(samples) < 3:
            failed += 1
            continue
        try:
            estimates.append(calibrate_case(samples, tau, idm))
        except EstimationFailed:
            failed += 1
    if not estimates:
        return [], estimates, skipped, failed
    edges = np.linspace(*T_BOUNDS, bins + 1)
    counts, _ = np.histogram(np.clip(estimates, *T_BOUNDS), bins=edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    hist = [{"T": float(c), "weight": float(n / counts.sum())} for c, n in zip(centers, counts) if n > 0]
    return hist, estimates, skipped, failed


# ---------------------------------------------------------------- artifact files

def write_csv(path, rows: list[dict], header: list[str], columns=None) -> None:
    """CSV with a ``#`` comment preamble; numbers written with repr for exact reruns."""
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    for ln in header:
        buf.write(ln + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in columns])
    Path(path).write_text(buf.getvalue())


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(r for r in fh if not r.startswith("#")))


def trace_rows(res: EpisodeResult, method: str, case: int = 0) -> list[dict]:
    rows = []
    n = res.steps
    for k in range(n):
        row = {"method": method, "case": case, "T_true": res.T_true, "step": k,
               "v_p": res.v_p[k], "v_h": res.v_h[k], "a_h": res.a_h[k], "r": res.rewards[k]}
        if res.v_c is not None:
            row.update({"v_c": res.v_c[k], "u_L": res.u_L[k], "u_s": res.u_c[k],
                        "x1": res.x[k, 0], "x2": res.x[k, 1],
                        "xbar1": res.xbar0[k, 0], "xbar2": res.xbar0[k, 1],
                        "r_c": res.components["r_c"][k], "r_h": res.components["r_h"][k],
                        "r_t": res.components["r_t"][k], "r_s": res.components["r_s"][k]})
        rows.append(row)
    return rows


TRACE_COLUMNS = ("method", "case", "T_true", "step", "v_p", "v_c", "v_h", "u_L", "u_s", "a_h",
                 "x1", "x2", "xbar1", "xbar2", "r", "r_c", "r_h", "r_t", "r_s")


def rmpc_report(rc: RmpcConfig) -> dict:
    out = rc.summary()
    out["Xbar_offsets"] = rc.Xbar.g.tolist()
    out["X_offsets"] = rc.X.g.tolist()
    out["margins"] = verify_config(rc)
    return out
