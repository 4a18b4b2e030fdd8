"""Fitted battery power polynomial and trip-energy integration."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# power in W for v in m/s, a in m/s^2; row i is the power of v, column j the power of a
_DEFAULT_COEFFS = np.array([
    [110.3, 1213.0, 2911.0],
    [422.9, 2484.0, 25.19],
    [-0.0279, 1.374, 0.0],
    [0.3557, 0.0, 0.0],
])

FIT_V_RANGE = (0.0, 25.0)
FIT_A_RANGE = (-3.0, 3.0)


@dataclass(frozen=True)
class EnergyCoeffs:
    p: np.ndarray = field(default_factory=lambda: _DEFAULT_COEFFS.copy())

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.shape != (4, 3):
            raise ValueError("coefficient grid must be 4x3 (v^0..v^3, a^0..a^2)")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    def __getitem__(self, ij: tuple[int, int]) -> float:
        return float(self.p[ij])


DEFAULT_COEFFS = EnergyCoeffs()


def power(v, a, c: EnergyCoeffs = DEFAULT_COEFFS):
    """Instantaneous battery power in W; accepts scalars or arrays."""
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    if log.isEnabledFor(logging.DEBUG):
        if np.any((v < FIT_V_RANGE[0]) | (v > FIT_V_RANGE[1]) |
                  (a < FIT_A_RANGE[0]) | (a > FIT_A_RANGE[1])):
            log.debug("power evaluated outside the fitted range")
    p = c.p
    # Horner in v for each power of a
    col = [((p[3, j] * v + p[2, j]) * v + p[1, j]) * v + p[0, j] for j in range(3)]
    out = col[0] + a * (col[1] + a * col[2])
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class TripEnergy:
    kj: float
    km: float
    kj_per_km: float  # nan when the distance is zero

    @property
    def per_km_defined(self) -> bool:
        return not math.isnan(self.kj_per_km)


def trip_energy(velocities, accels, tau: float, c: EnergyCoeffs = DEFAULT_COEFFS) -> TripEnergy:
    v = np.asarray(velocities, dtype=float)
    a = np.asarray(accels, dtype=float)
    if v.shape != a.shape or v.size == 0:
        raise ValueError("velocity and acceleration sequences must be equal and non-empty")
    kj = float(np.sum(power(v, a, c)) * tau / 1000.0)
    km = float(np.sum(v) * tau / 1000.0)
    return TripEnergy(kj, km, kj / km if km > 0 else math.nan)
