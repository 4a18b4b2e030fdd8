import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ecosafe.energy import DEFAULT_COEFFS, EnergyCoeffs, power, trip_energy
from oracles import power_bruteforce

speeds = st.floats(0, 30, allow_nan=False)
accels = st.floats(-3, 3, allow_nan=False)


def test_default_coefficients():
    expect = {(0, 0): 110.3, (1, 0): 422.9, (0, 1): 1213, (2, 0): -0.0279, (1, 1): 2484,
              (0, 2): 2911, (3, 0): 0.3557, (2, 1): 1.374, (1, 2): 25.19}
    for i in range(4):
        for j in range(3):
            assert DEFAULT_COEFFS[i, j] == expect.get((i, j), 0.0)


def test_power_examples():
    assert power(0, 0) == 110.3
    assert power(1, 0) == pytest.approx(533.5278, abs=1e-9)
    assert power(8.5, 0) == pytest.approx(110.3 + 422.9 * 8.5 - 0.0279 * 8.5**2 + 0.3557 * 8.5**3)
    assert power(8.5, 0) == pytest.approx(3921.38, abs=0.01)


def test_power_matches_bruteforce_grid():
    rng = np.random.default_rng(0)
    v = rng.uniform(0, 30, 10_000)
    a = rng.uniform(-3, 3, 10_000)
    got = power(v, a)
    ref = np.array([power_bruteforce(vi, ai, DEFAULT_COEFFS.p) for vi, ai in zip(v, a)])
    np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-9)


def test_custom_coefficients():
    p = np.zeros((4, 3))
    p[3, 2] = 1.0
    assert power(2.0, 3.0, EnergyCoeffs(p)) == pytest.approx(72.0)
    with pytest.raises(ValueError):
        EnergyCoeffs(np.zeros((3, 3)))


def test_trip_examples():
    t = trip_energy([0.0], [0.0], 0.5)
    assert t.kj == pytest.approx(0.05515) and not t.per_km_defined and math.isnan(t.kj_per_km)
    t = trip_energy(np.full(100, 10.0), np.zeros(100), 0.5)
    assert t.km == pytest.approx(0.5)
    assert t.kj == pytest.approx(50 * power(10, 0) / 1000)
    with pytest.raises(ValueError):
        trip_energy([1, 2], [0], 0.5)


@given(st.lists(st.tuples(speeds, accels), min_size=1, max_size=30),
       st.lists(st.tuples(speeds, accels), min_size=1, max_size=30))
def test_trip_energy_additive(first, second):
    v1, a1 = map(np.array, zip(*first))
    v2, a2 = map(np.array, zip(*second))
    whole = trip_energy(np.r_[v1, v2], np.r_[a1, a2], 0.5)
    e1, e2 = trip_energy(v1, a1, 0.5), trip_energy(v2, a2, 0.5)
    assert whole.kj == pytest.approx(e1.kj + e2.kj, rel=1e-9, abs=1e-9)
    assert whole.km == pytest.approx(e1.km + e2.km, rel=1e-12, abs=1e-12)


@given(speeds, st.floats(0.01, 3))
def test_positive_accel_costs_more(v, a):
    assert power(v, a) > power(v, 0.0)
