"""Human driver model: IDM car following, stochastic execution, headway estimation."""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_model import DomainError, ModelParams, VehicleState, step_vehicle
from .numerics import EstimationFailed, fit_scalar_nls

log = logging.getLogger(__name__)

T_BOUNDS = (0.5, 3.0)
T_PRIOR = 1.0


@dataclass(frozen=True)
class IdmParams:
    a0: float = 4.0
    delta0: float = 4.0
    v_d: float = 25.0
    s0: float = 2.0
    b0_mag: float = 5.0
    T: float = 1.0

    def __post_init__(self):
        for name in ("a0", "v_d", "s0", "b0_mag", "T"):
            if not getattr(self, name) > 0:
                raise DomainError(f"IDM parameter {name} must be positive")

    def with_T(self, T: float) -> "IdmParams":
        return IdmParams(self.a0, self.delta0, self.v_d, self.s0, self.b0_mag, T)


def idm_accel(p: IdmParams, v: float, dv: float, s: float) -> float:
    """IDM acceleration; ``dv`` is own speed minus the leader's, ``s`` the gap."""
    if not s > 0:
        raise DomainError(f"IDM gap must be positive, got {s}")
    s_star = p.s0 + max(0.0, p.T * v + v * dv / (2.0 * math.sqrt(p.a0 * p.b0_mag)))
    return p.a0 * (1.0 - (v / p.v_d) ** p.delta0 - (s_star / s) ** 2)


def idm_accel_vec(p: IdmParams, T, v, dv, s):
    """Vectorised IDM over arrays (T may be a scalar or array)."""
    v = np.asarray(v, dtype=float)
    s_star = p.s0 + np.maximum(0.0, T * v + v * np.asarray(dv) / (2.0 * math.sqrt(p.a0 * p.b0_mag)))
    return p.a0 * (1.0 - (v / p.v_d) ** p.delta0 - (s_star / np.asarray(s)) ** 2)


def step_hdv(x_h: VehicleState, a_h: float, delta_a_h: float, params: ModelParams,
             events: list | None = None) -> VehicleState:
    """Advance the HDV with multiplicative acceleration noise; speed floors at 0."""
    a_eff = (1.0 + delta_a_h) * a_h
    nxt = step_vehicle(x_h, a_eff, params)
    if nxt.v < 0.0:
        # stop within the step: integrate only until v reaches 0
        t_stop = x_h.v / -a_eff if a_eff < 0 else 0.0
        s_stop = x_h.s + x_h.v * t_stop + 0.5 * a_eff * t_stop**2
        log.debug("HDV speed clamped at 0 (v=%.3f, a=%.3f)", x_h.v, a_eff)
        if events is not None:
            events.append("hdv_velocity_clamp")
        nxt = VehicleState(s_stop, 0.0)
    return nxt


@dataclass
class BehaviorEstimate:
    """Online least-squares estimate of the follower's IDM time headway."""

    tau: float = 0.5
    window_size: int = 50
    refit_every: int = 10
    T_hat: float = T_PRIOR
    window: deque = field(default=None)
    sample_count: int = 0
    failed: bool = False

    def __post_init__(self):
        if self.window is None:
            self.window = deque(maxlen=self.window_size + 1)

    @property
    def window_full(self) -> bool:
        return len(self.window) > self.window_size


def fit_headway(samples, tau: float, defaults: IdmParams, tol: float = 1e-4) -> float:
    """Least-squares T from consecutive (v_h, v_c, s_ch) samples.

    The observed acceleration is the forward difference of v_h.
    """
    arr = np.asarray(samples, dtype=float)
    v_h, v_c, s = arr[:-1, 0], arr[:-1, 1], arr[:-1, 2]
    a_obs = np.diff(arr[:, 0]) / tau
    keep = (s > 0) & (arr[1:, 0] > 0)  # drop clamped / collided samples
    v_h, v_c, s, a_obs = v_h[keep], v_c[keep], s[keep], a_obs[keep]
    if len(a_obs) == 0:
        raise EstimationFailed("no usable samples")
    dv = v_h - v_c

    def residual(T):
        return a_obs - idm_accel_vec(defaults, T, v_h, dv, s)

    return fit_scalar_nls(residual, T_BOUNDS, tol=tol)


def update_estimate(est: BehaviorEstimate, sample, defaults: IdmParams) -> BehaviorEstimate:
    est.window.append(tuple(float(x) for x in sample))
    est.sample_count += 1
    if est.window_full and (est.sample_count - est.window_size - 1) % est.refit_every == 0:
        try:
            est.T_hat = float(np.clip(fit_headway(est.window, est.tau, defaults), *T_BOUNDS))
            est.failed = False
        except EstimationFailed:
            est.failed = True
    return est


def estimated_hdv_accel(est: BehaviorEstimate, v_h: float, s_ch: float, v_c: float,
                        defaults: IdmParams) -> float:
    return idm_accel(defaults.with_T(est.T_hat), v_h, v_h - v_c, s_ch)


@dataclass(frozen=True)
class PreferenceDistribution:
    values: np.ndarray
    weights: np.ndarray

    @classmethod
    def uniform_grid(cls, lo: float = 0.5, hi: float = 3.0, n: int = 100) -> "PreferenceDistribution":
        return cls(np.linspace(lo, hi, n), np.full(n, 1.0 / n))

    @classmethod
    def from_json(cls, path) -> "PreferenceDistribution":
        rows = json.loads(Path(path).read_text())
        if not rows:
            raise ValueError(f"{path}: empty preference distribution")
        vals = np.array([r["T"] for r in rows], dtype=float)
        w = np.array([r["weight"] for r in rows], dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative with a positive sum")
        return cls(vals, w / w.sum())

    def to_json(self, path) -> None:
        rows = [{"T": float(t), "weight": float(w)} for t, w in zip(self.values, self.weights)]
        Path(path).write_text(json.dumps(rows, indent=1))


def sample_preference(dist: PreferenceDistribution, rng: np.random.Generator) -> float:
    return float(dist.values[rng.choice(len(dist.values), p=dist.weights)])
