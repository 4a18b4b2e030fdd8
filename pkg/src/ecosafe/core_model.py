"""Longitudinal vehicle kinematics and the car-following error system.

Every vehicle is a double integrator sampled at ``tau``.  The controlled
quantity is the error state ``x = x_p + H x_c`` between the preceding vehicle
(PV) and the CAV under a constant-time-headway spacing policy::

    x1 = s_p - s_c - h * v_c      (gap minus headway distance)
    x2 = v_p - v_c                (relative velocity)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class DomainError(ValueError):
    """Raised when an input lies outside the domain of a model operation."""


def _finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise DomainError(f"non-finite input: {v!r}")


@dataclass(frozen=True)
class ModelParams:
    tau: float = 0.5
    h: float = 0.5
    A: np.ndarray = field(init=False, repr=False, compare=False)
    B: np.ndarray = field(init=False, repr=False, compare=False)
    H: np.ndarray = field(init=False, repr=False, compare=False)
    Bc: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (self.tau > 0 and self.h >= 0):
            raise DomainError(f"need tau > 0 and h >= 0, got tau={self.tau}, h={self.h}")
        tau, h = self.tau, self.h
        A = np.array([[1.0, tau], [0.0, 1.0]])
        B = np.array([0.5 * tau**2, tau])
        H = np.array([[-1.0, -h], [0.0, -1.0]])
        for name, val in (("A", A), ("B", B), ("H", H), ("Bc", H @ B)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)


class VehicleState(NamedTuple):
    s: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.v])


class CarFollowingState(NamedTuple):
    x1: float
    x2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2])

    @classmethod
    def from_array(cls, x) -> "CarFollowingState":
        return cls(float(x[0]), float(x[1]))


@dataclass(frozen=True)
class ConstraintSpec:
    """Bounds on the error state and the CAV acceleration (all magnitudes)."""

    x1_min: float = 2.0
    x2_min: float = 5.0
    x2_max: float = 5.0
    u_min: float = 3.0
    u_max: float = 3.0

    def __post_init__(self):
        for name in ("x1_min", "x2_min", "x2_max", "u_min", "u_max"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")

    def state_halfspaces(self) -> tuple[np.ndarray, np.ndarray]:
        """Rows ``F x <= g`` of the state set (unbounded in +x1)."""
        F = np.array([[-1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])
        g = np.array([self.x1_min, self.x2_min, self.x2_max])
        return F, g


@dataclass(frozen=True)
class DisturbanceSpec:
    c_w: float = 0.3
    sigma: float = 0.1
    n_p: float = 0.2
    n_h: float = 0.05
    b_s: float = 0.1
    b_v: float = 0.2
    tau: float = 0.5

    def __post_init__(self):
        for name in ("c_w", "sigma", "n_p", "n_h", "b_s", "b_v"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")
        if self.lumped_bound() > self.c_w + 1e-12:
            raise DomainError(
                f"noise bounds imply |w|_inf up to {self.lumped_bound():.4g} > c_w={self.c_w}"
            )

    def lumped_bound(self) -> float:
        tau = self.tau
        meas = max(self.b_s + tau * self.b_v, self.b_v)
        pred = max(0.5 * tau**2, tau) * self.n_p
        return meas + pred


def step_vehicle(state: VehicleState, u: float, params: ModelParams) -> VehicleState:
    _finite(state.s, state.v, u)
    tau = params.tau
    return VehicleState(state.s + tau * state.v + 0.5 * tau**2 * u, state.v + tau * u)


def compose_error_state(pv: VehicleState, cav: VehicleState, params: ModelParams) -> CarFollowingState:
    return CarFollowingState(pv.s - cav.s - params.h * cav.v, pv.v - cav.v)


def step_nominal(xbar, ubar_c: float, abar_p: float, params: ModelParams) -> CarFollowingState:
    x = np.asarray(xbar, dtype=float)
    return CarFollowingState.from_array(params.A @ x + params.Bc * ubar_c + params.B * abar_p)


def step_actual(x, u_c: float, abar_p: float, w, params: ModelParams,
                c_w: float | None = None) -> CarFollowingState:
    w = np.asarray(w, dtype=float)
    if c_w is not None and np.max(np.abs(w)) > c_w + 1e-12:
        raise DomainError(f"disturbance {w} exceeds bound c_w={c_w}")
    nxt = params.A @ np.asarray(x, dtype=float) + params.Bc * u_c + params.B * abar_p + w
    return CarFollowingState.from_array(nxt)


def truncated_normal(rng: np.random.Generator, sigma: float, bound: float) -> float:
    """Rejection sample from N(0, sigma^2) restricted to [-bound, bound]."""
    if bound <= 0 or sigma <= 0:
        return 0.0
    while True:
        z = rng.normal(0.0, sigma)
        if abs(z) <= bound:
            return float(z)


class Disturbances(NamedTuple):
    delta_a_p: float
    delta_p: np.ndarray
    delta_a_h: float


def sample_disturbances(spec: DisturbanceSpec, rng: np.random.Generator) -> Disturbances:
    da_p = truncated_normal(rng, spec.sigma, spec.n_p)
    ds = rng.uniform(-spec.b_s, spec.b_s) if spec.b_s > 0 else 0.0
    dv = rng.uniform(-spec.b_v, spec.b_v) if spec.b_v > 0 else 0.0
    da_h = truncated_normal(rng, spec.sigma, spec.n_h)
    return Disturbances(da_p, np.array([ds, dv]), da_h)


def lumped_disturbance(d: Disturbances, params: ModelParams) -> np.ndarray:
    """w = A Delta_p - B Delta_a_p, the disturbance seen by the error system."""
    return params.A @ d.delta_p - params.B * d.delta_a_p


class ConstraintCheck(NamedTuple):
    satisfied: bool
    margins: dict[str, float]

    def violated(self) -> list[str]:
        return [k for k, m in self.margins.items() if m < 0]


def check_constraints(x, u: float, spec: ConstraintSpec) -> ConstraintCheck:
    x1, x2 = float(x[0]), float(x[1])
    margins = {
        "x1_min": x1 + spec.x1_min,
        "x2_min": x2 + spec.x2_min,
        "x2_max": spec.x2_max - x2,
        "u_min": u + spec.u_min,
        "u_max": spec.u_max - u,
    }
    return ConstraintCheck(all(m >= 0 for m in margins.values()), margins)
