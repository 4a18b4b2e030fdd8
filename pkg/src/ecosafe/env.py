"""Eco-driving MDP: PV -> CAV -> HDV string with noisy PV channel and stochastic HDV."""
from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .core_model import (ConstraintSpec, DisturbanceSpec, ModelParams, VehicleState, check_constraints,
                         compose_error_state, step_vehicle, truncated_normal)
from .driver import (BehaviorEstimate, IdmParams, estimated_hdv_accel, idm_accel, step_hdv,
                     update_estimate)
from .energy import DEFAULT_COEFFS, EnergyCoeffs, power, trip_energy
from .safety_filter import CertificationFailed, RmpcConfig, SafetyFilter, predict_pv_profile

log = logging.getLogger(__name__)

MODES = ("safe", "raw", "rmpc")
U_BOUND = 3.0


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose derived from one master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *extra]))


@dataclass(frozen=True)
class RewardConfig:
    alpha_c: float = 1.0 / 30000
    alpha_h: float = 1.0 / 30000
    alpha_t: float = 1.0 / 25
    tg_threshold: float = 2.5
    ttc_max: float = 4.0
    collision_penalty: float = -500.0
    clip: float = 1.0


@dataclass(frozen=True)
class InitialConditions:
    s_pc: float = 20.0
    s_ch: float = 20.0
    dv_pc: float = 1.6416
    v_c: float = 8.5
    v_h: float = 8.0


TRAIN_INIT = InitialConditions()
TEST_INIT = InitialConditions(s_pc=15.0)


@dataclass(frozen=True)
class ScenarioConfig:
    """A: HDV behind PV only; B: CAV without HDV information; C: full layout."""

    scenario: str = "C"
    n_steps: int = 300
    init: InitialConditions = TRAIN_INIT
    reward_action: str = "applied"   # or "proposed"
    collision_gap: float = 0.0
    pv_track_tau: float = 2.0

    def __post_init__(self):
        if self.scenario not in ("A", "B", "C"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.reward_action not in ("applied", "proposed"):
            raise ValueError(self.reward_action)

    @property
    def state_dim(self) -> int:
        return {"A": 0, "B": 3, "C": 5}[self.scenario]


@dataclass(frozen=True)
class World:
    s_pc: float
    s_ch: float
    v_p: float
    v_c: float
    v_h: float


# ---------------------------------------------------------------- PV profiles

@dataclass(frozen=True)
class PvProfile:
    v: np.ndarray  # reference speed at each step
    a: np.ndarray  # forward-difference acceleration, same length (last held)

    def __len__(self) -> int:
        return len(self.v)


def profile_from_speeds(v, tau: float) -> PvProfile:
    v = np.asarray(v, dtype=float)
    a = np.append(np.diff(v) / tau, 0.0) if len(v) > 1 else np.zeros(1)
    return PvProfile(v, a)


def synthetic_profile(rng: np.random.Generator, n_steps: int, tau: float = 0.5, v0: float = 10.1416,
                      v_range=(10.0, 20.0), a_max: float = 1.5) -> PvProfile:
    """Random ramps and cruises plus a slow sinusoid, kept inside ``v_range``."""
    lo, hi = v_range
    acc = np.empty(n_steps)
    k = 0
    while k < n_steps:
        seg = int(rng.integers(10, 41))
        val = 0.0 if rng.random() < 0.3 else rng.uniform(-a_max, a_max)
        acc[k:k + seg] = val
        k += seg
    t = np.arange(n_steps)
    amp = rng.uniform(0.0, 0.4 * a_max)
    acc = acc + amp * np.sin(2 * np.pi * t / rng.uniform(20, 80) + rng.uniform(0, 2 * np.pi))
    acc = np.convolve(acc, np.ones(5) / 5, mode="same")
    acc = np.clip(acc, -a_max, a_max)
    v = np.empty(n_steps + 1)
    v[0] = v0
    for i in range(n_steps):
        v[i + 1] = min(max(v[i] + tau * acc[i], lo), hi)
    return profile_from_speeds(v, tau)


def constant_profile(v: float, n_steps: int, tau: float = 0.5) -> PvProfile:
    return profile_from_speeds(np.full(n_steps + 1, float(v)), tau)


def load_profile_csv(path, tau: float = 0.5) -> PvProfile:
    """Read a ``t,v`` speed trace sampled every ``tau`` seconds."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(row for row in fh if not row.startswith("#"))]
    if not rows or "t" not in rows[0] or "v" not in rows[0]:
        raise ValueError(f"{path}: expected a header with columns t,v")
    t = np.array([float(r["t"]) for r in rows])
    v = np.array([float(r["v"]) for r in rows])
    if len(t) > 1 and not np.allclose(np.diff(t), tau, atol=1e-6):
        raise ValueError(f"{path}: samples must be spaced {tau} s apart")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError(f"{path}: speeds must be finite and nonnegative")
    return profile_from_speeds(v, tau)


# ---------------------------------------------------------------- MDP pieces

def observe(world: World, sc: ScenarioConfig) -> np.ndarray:
    if sc.scenario == "C":
        return np.array([world.s_pc, world.s_ch, world.v_p - world.v_c, world.v_c, world.v_h])
    if sc.scenario == "B":
        return np.array([world.s_pc, world.v_p - world.v_c, world.v_c])
    return np.zeros(0)


@dataclass(frozen=True)
class RewardParts:
    r_c: float
    r_h: float
    r_t: float
    r_s: float
    collision: float = 0.0

    @property
    def total(self) -> float:
        return self.r_c + self.r_h + self.r_t + self.r_s + self.collision


def reward(world: World, u_c: float, a_h_hat: float | None, rc: RewardConfig = RewardConfig(),
           tau: float = 0.5, coeffs: EnergyCoeffs = DEFAULT_COEFFS) -> RewardParts:
    """Reward terms; ``a_h_hat=None`` drops the HDV energy term (no HDV information)."""
    r_c = float(np.clip(-rc.alpha_c * power(world.v_c, u_c, coeffs) * tau, -rc.clip, rc.clip))
    r_h = 0.0
    if a_h_hat is not None:
        r_h = float(np.clip(-rc.alpha_h * power(world.v_h, a_h_hat, coeffs) * tau, -rc.clip, rc.clip))
    tg = world.s_pc / world.v_c if world.v_c > 0 else math.inf
    r_t = -rc.alpha_t * world.s_pc if tg >= rc.tg_threshold else 0.0
    r_s = 0.0
    dv = world.v_p - world.v_c
    if dv < 0:
        ttc = -world.s_pc / dv
        if 0 < ttc <= rc.ttc_max:
            r_s = math.log(ttc / rc.ttc_max)
    return RewardParts(r_c, r_h, r_t, r_s)


@dataclass
class EpisodeResult:
    scenario: str
    mode: str
    seed: int
    T_true: float
    T_hat: float
    steps: int
    s_p: np.ndarray
    v_p: np.ndarray
    a_p: np.ndarray
    s_c: np.ndarray | None
    v_c: np.ndarray | None
    u_c: np.ndarray | None
    u_L: np.ndarray | None
    s_h: np.ndarray
    v_h: np.ndarray
    a_h: np.ndarray
    x: np.ndarray | None
    xbar0: np.ndarray | None
    rewards: np.ndarray
    components: dict = field(repr=False, default_factory=dict)
    violations: int = 0
    collision: bool = False
    qp_failures: int = 0
    tube_min_margin: float = math.inf
    cav_kj: float = math.nan
    cav_kj_per_km: float = math.nan
    hdv_kj: float = math.nan
    hdv_kj_per_km: float = math.nan

    @property
    def holistic_kj_per_km(self) -> float:
        if self.v_c is None:
            return self.hdv_kj_per_km
        return self.cav_kj_per_km + self.hdv_kj_per_km

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))


class EcoDrivingEnv:
    """One PV/CAV/HDV string.  Call ``reset`` then ``step`` until done."""

    def __init__(self, sc: ScenarioConfig, mode: str, rmpc: RmpcConfig | None = None,
                 dist: DisturbanceSpec = DisturbanceSpec(), model: ModelParams = ModelParams(),
                 constraints: ConstraintSpec = ConstraintSpec(), idm: IdmParams = IdmParams(),
                 rc: RewardConfig = RewardConfig(), coeffs: EnergyCoeffs = DEFAULT_COEFFS,
                 filt: SafetyFilter | None = None, n_hold: int = 4):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.sc, self.mode, self.dist, self.model = sc, mode, dist, model
        self.constraints, self.idm, self.rc, self.coeffs = constraints, idm, rc, coeffs
        self.n_hold = n_hold
        self.filt = None
        if sc.scenario != "A" and mode in ("safe", "rmpc"):
            if filt is None:
                if rmpc is None:
                    raise ValueError("safe/rmpc modes need an RmpcConfig or a SafetyFilter")
                filt = SafetyFilter(rmpc.with_tracking_weight(0.0) if mode == "rmpc" else rmpc)
            self.filt = filt

    # -- episode lifecycle
    def reset(self, seed: int, T_true: float, profile: PvProfile | None = None, episode: int = 0):
        sc, init = self.sc, self.sc.init
        self.seed, self.T_true = seed, float(T_true)
        self.rng_pv = substream(seed, "pv-noise", episode)
        self.rng_hdv = substream(seed, "hdv-noise", episode)
        if profile is None:
            profile = synthetic_profile(substream(seed, "init", episode), sc.n_steps, self.model.tau,
                                        v0=init.v_c + init.dv_pc)
        if len(profile) < sc.n_steps + 1:
            v = np.concatenate([profile.v, np.full(sc.n_steps + 1 - len(profile), profile.v[-1])])
            profile = profile_from_speeds(v, self.model.tau)
        self.profile = profile
        self.k = 0
        self.done = False
        self.events: list[str] = []
        v_p0 = init.v_c + init.dv_pc
        self.pv = VehicleState(init.s_pc, v_p0)
        if sc.scenario == "A":
            self.cav = None
            self.hdv = VehicleState(0.0, init.v_c)
        else:
            self.cav = VehicleState(0.0, init.v_c)
            self.hdv = VehicleState(-init.s_ch, init.v_h)
        self.est = BehaviorEstimate(tau=self.model.tau)
        if self.filt is not None:
            self.filt.reset()
        self._log = {k: [] for k in ("s_p", "v_p", "a_p", "s_c", "v_c", "u_c", "u_L", "s_h", "v_h",
                                     "a_h", "x", "xbar0", "r", "r_c", "r_h", "r_t", "r_s")}
        self.violations = 0
        self.collision = False
        self.qp_failures = 0
        self.tube_min = math.inf
        self._draw_measurement()
        self._push_estimate()
        if self.cav is not None:
            self._count_violation(self.error_state(), 0.0)
        return self.observation()

    def _draw_measurement(self):
        d = self.dist
        self.delta_p = np.array([self.rng_pv.uniform(-d.b_s, d.b_s) if d.b_s > 0 else 0.0,
                                 self.rng_pv.uniform(-d.b_v, d.b_v) if d.b_v > 0 else 0.0])

    def _leader_of_hdv(self) -> VehicleState:
        return self.pv if self.cav is None else self.cav

    def _push_estimate(self):
        if self.sc.scenario == "C":
            lead = self.cav
            update_estimate(self.est, (self.hdv.v, lead.v, lead.s - self.hdv.s), self.idm)

    def error_state(self) -> np.ndarray:
        return compose_error_state(self.pv, self.cav, self.model).as_array()

    def world(self, measured: bool = False) -> World:
        s_p, v_p = self.pv.s, self.pv.v
        if measured:
            s_p, v_p = s_p + self.delta_p[0], v_p + self.delta_p[1]
        lead = self._leader_of_hdv()
        if self.cav is None:
            return World(s_p - lead.s, lead.s - self.hdv.s, v_p, lead.v, self.hdv.v)
        return World(s_p - self.cav.s, self.cav.s - self.hdv.s, v_p, self.cav.v, self.hdv.v)

    def observation(self) -> np.ndarray:
        return observe(self.world(measured=True), self.sc)

    def _count_violation(self, x, u):
        chk = check_constraints(x, u, self.constraints)
        if min(chk.margins.values()) < -1e-9:
            self.violations += 1

    def _pv_accel(self) -> float:
        k, prof = self.k, self.profile
        a = prof.a[k] + (prof.v[k] - self.pv.v) / self.sc.pv_track_tau
        return float(np.clip(a, -U_BOUND, U_BOUND))

    # -- transition
    def step(self, u_L: float = 0.0):
        if self.done:
            raise RuntimeError("episode finished; call reset")
        d, m, sc = self.dist, self.model, self.sc
        a_p = self._pv_accel()
        da_p = truncated_normal(self.rng_pv, d.sigma, d.n_p) if d.n_p > 0 else 0.0
        da_h = truncated_normal(self.rng_hdv, d.sigma, d.n_h) if d.n_h > 0 else 0.0
        w_pre = self.world()
        info = {"qp_failure": False, "backup": False}
        u_c = math.nan
        xbar0 = (math.nan, math.nan)
        if self.cav is not None:
            x = self.error_state()
            u_prop = float(np.clip(u_L, -U_BOUND, U_BOUND))
            if self.mode == "raw":
                u_c = u_prop
            else:
                u_req = 0.0 if self.mode == "rmpc" else u_prop
                prof = predict_pv_profile(a_p + da_p, self.filt.cfg.N, self.n_hold)
                try:
                    act = self.filt.certify(x, u_req, prof)
                except CertificationFailed as e:
                    self.qp_failures += 1
                    info["qp_failure"] = True
                    log.warning("safety QP failed at step %d: %s", self.k, e)
                    act = e.backup
                if act is None:
                    # no plan yet: tube feedback about the origin
                    u_c = float(np.clip(self.filt.cfg.K @ x, -U_BOUND, U_BOUND))
                else:
                    u_c = act.u_s
                    xbar0 = tuple(act.xbar0)
                    self.tube_min = min(self.tube_min, act.tube_margin)
                    info["backup"] = act.backup
            info["u_L"] = u_prop
        # HDV acceleration from the true IDM on the true gap
        lead = self._leader_of_hdv()
        gap_h = lead.s - self.hdv.s
        a_h = idm_accel(self.idm.with_T(self.T_true), self.hdv.v, self.hdv.v - lead.v, gap_h)
        a_h_hat = None
        if sc.scenario == "C":
            a_h_hat = estimated_hdv_accel(self.est, self.hdv.v, gap_h, lead.v, self.idm)
        parts = None
        if self.cav is not None:
            u_r = u_c if sc.reward_action == "applied" else info["u_L"]
            parts = reward(w_pre, u_r, a_h_hat, self.rc, m.tau, self.coeffs)

        self._record(a_p, u_c, info.get("u_L", math.nan), (1.0 + da_h) * a_h, xbar0)
        # propagate: PV carries its measurement perturbation into the next state
        xp = m.A @ (self.pv.as_array() + self.delta_p) + m.B * a_p
        self.pv = VehicleState(float(xp[0]), float(xp[1]))
        if self.cav is not None:
            self.cav = self._step_cav(u_c)
        self.hdv = step_hdv(self.hdv, a_h, da_h, m, self.events)
        self.k += 1
        self._draw_measurement()
        self._push_estimate()

        w_post = self.world()
        if w_post.s_ch <= sc.collision_gap or (self.cav is not None and w_post.s_pc <= sc.collision_gap):
            self.collision = True
        if self.cav is not None:
            self._count_violation(self.error_state(), u_c)
            if self.collision:
                parts = RewardParts(parts.r_c, parts.r_h, parts.r_t, parts.r_s, self.rc.collision_penalty)
            r = parts.total
            for key in ("r_c", "r_h", "r_t", "r_s"):
                self._log[key].append(getattr(parts, key))
        else:
            r = 0.0
        self._log["r"].append(r)
        self.done = self.collision or self.k >= sc.n_steps
        info["collision"] = self.collision
        info["truncated"] = self.k >= sc.n_steps and not self.collision
        info["u_c"] = u_c
        return self.observation(), r, self.done, info

    def _step_cav(self, u: float) -> VehicleState:
        nxt = step_vehicle(self.cav, u, self.model)
        if nxt.v < 0.0:
            t_stop = self.cav.v / -u if u < 0 else 0.0
            self.events.append("cav_velocity_clamp")
            return VehicleState(self.cav.s + self.cav.v * t_stop + 0.5 * u * t_stop**2, 0.0)
        return nxt

    def _record(self, a_p, u_c, u_L, a_h, xbar0):
        L = self._log
        L["s_p"].append(self.pv.s)
        L["v_p"].append(self.pv.v)
        L["a_p"].append(a_p)
        L["s_h"].append(self.hdv.s)
        L["v_h"].append(self.hdv.v)
        L["a_h"].append(a_h)
        if self.cav is not None:
            L["s_c"].append(self.cav.s)
            L["v_c"].append(self.cav.v)
            L["u_c"].append(u_c)
            L["u_L"].append(u_L)
            L["x"].append(self.error_state())
            L["xbar0"].append(xbar0)

    def result(self) -> EpisodeResult:
        L, tau = self._log, self.model.tau
        arr = {k: np.asarray(v, dtype=float) for k, v in L.items()}
        has_cav = self.cav is not None
        hdv = trip_energy(arr["v_h"], arr["a_h"], tau, self.coeffs)
        res = EpisodeResult(
            scenario=self.sc.scenario, mode=self.mode, seed=self.seed, T_true=self.T_true,
            T_hat=self.est.T_hat, steps=self.k,
            s_p=arr["s_p"], v_p=arr["v_p"], a_p=arr["a_p"],
            s_c=arr["s_c"] if has_cav else None, v_c=arr["v_c"] if has_cav else None,
            u_c=arr["u_c"] if has_cav else None, u_L=arr["u_L"] if has_cav else None,
            s_h=arr["s_h"], v_h=arr["v_h"], a_h=arr["a_h"],
            x=arr["x"].reshape(-1, 2) if has_cav else None,
            xbar0=arr["xbar0"].reshape(-1, 2) if has_cav else None,
            rewards=arr["r"],
            components={k: arr[k] for k in ("r_c", "r_h", "r_t", "r_s")} if has_cav else {},
            violations=self.violations, collision=self.collision, qp_failures=self.qp_failures,
            tube_min_margin=self.tube_min, hdv_kj=hdv.kj, hdv_kj_per_km=hdv.kj_per_km,
        )
        if has_cav:
            cav = trip_energy(arr["v_c"], arr["u_c"], tau, self.coeffs)
            res.cav_kj, res.cav_kj_per_km = cav.kj, cav.kj_per_km
        return res


def step_env(env: EcoDrivingEnv, u_L: float):
    return env.step(u_L)


def run_episode(env: EcoDrivingEnv, policy, seed: int, T_true: float,
                profile: PvProfile | None = None, episode: int = 0) -> EpisodeResult:
    """Roll out ``policy(obs) -> u_L`` for one episode (policy ignored in rmpc mode and scenario A)."""
    obs = env.reset(seed, T_true, profile, episode)
    while not env.done:
        u = 0.0 if (policy is None or env.cav is None or env.mode == "rmpc") else float(policy(obs))
        obs, _, _, _ = env.step(u)
    return env.result()
