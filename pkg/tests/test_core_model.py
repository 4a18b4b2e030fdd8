import numpy as np
import pytest
from hypothesis import given, strategies as st

from ecosafe.core_model import (CarFollowingState, ConstraintSpec, DisturbanceSpec, DomainError,
                                ModelParams, VehicleState, check_constraints, compose_error_state,
                                lumped_disturbance, sample_disturbances, step_actual, step_nominal,
                                step_vehicle)

P = ModelParams()
finite = st.floats(-50, 50, allow_nan=False)


def test_matrices():
    np.testing.assert_array_equal(P.A, [[1, 0.5], [0, 1]])
    np.testing.assert_array_equal(P.B, [0.125, 0.5])
    np.testing.assert_array_equal(P.H, [[-1, -0.5], [0, -1]])
    np.testing.assert_allclose(P.Bc, [-0.375, -0.5])


@given(st.floats(0.01, 2), st.floats(0, 3))
def test_H_commutes_with_A(tau, h):
    m = ModelParams(tau, h)
    np.testing.assert_allclose(m.H @ m.A, m.A @ m.H, atol=1e-15)
    np.testing.assert_allclose(m.Bc, [-0.5 * tau**2 - h * tau, -tau], atol=1e-15)


def test_bad_params_rejected():
    with pytest.raises(DomainError):
        ModelParams(tau=0.0)
    with pytest.raises(DomainError):
        ConstraintSpec(x1_min=0.0)


@pytest.mark.parametrize("state,u,expected", [
    ((0, 10), 0, (5, 10)),
    ((0, 8), 2, (4.25, 9)),
    ((100, 0), -3, (99.625, -1.5)),
])
def test_step_vehicle(state, u, expected):
    assert step_vehicle(VehicleState(*state), u, P) == pytest.approx(expected)


def test_step_vehicle_rejects_nonfinite():
    with pytest.raises(DomainError):
        step_vehicle(VehicleState(0, np.nan), 0, P)
    with pytest.raises(DomainError):
        step_vehicle(VehicleState(0, 1), np.inf, P)


def test_compose_error_state():
    x = compose_error_state(VehicleState(15, 10.1416), VehicleState(0, 8.5), P)
    assert x == pytest.approx((10.75, 1.6416))
    assert compose_error_state(VehicleState(3, 4), VehicleState(3, 4), ModelParams(h=0.0)) == (0, 0)
    assert compose_error_state(VehicleState(4.25, 8.5), VehicleState(0, 8.5), P) == pytest.approx((0, 0))


def test_nominal_and_actual_examples():
    assert step_nominal((0, 0), 0, 0, P) == (0, 0)
    assert step_nominal((0, 0), 1, 0, P) == pytest.approx((-0.375, -0.5))
    assert step_nominal((0, 0), 0, 1, P) == pytest.approx((0.125, 0.5))
    assert step_actual((0, 0), 0, 0, (0.3, -0.3), P) == pytest.approx((0.3, -0.3))
    assert step_actual((1, 1), 0, 0, (0, 0), P) == pytest.approx((1.5, 1))
    with pytest.raises(DomainError):
        step_actual((0, 0), 0, 0, (0.31, 0), P, c_w=0.3)


@given(finite, finite, st.floats(-3, 3), st.floats(-3, 3))
def test_actual_reduces_to_nominal(x1, x2, u, a):
    assert step_actual((x1, x2), u, a, (0, 0), P) == step_nominal((x1, x2), u, a, P)


@given(finite, st.floats(0, 30), finite, st.floats(0, 30), st.floats(-3, 3), st.floats(-3, 3))
def test_error_dynamics_match_vehicle_dynamics(sp, vp, sc, vc, uc, ap):
    pv, cav = VehicleState(sp, vp), VehicleState(sc, vc)
    x0 = compose_error_state(pv, cav, P)
    x1 = compose_error_state(step_vehicle(pv, ap, P), step_vehicle(cav, uc, P), P)
    np.testing.assert_allclose(x1, step_actual(x0, uc, ap, (0, 0), P), atol=1e-12, rtol=0)


def test_disturbance_bounds_default_values():
    spec = DisturbanceSpec()
    assert spec.lumped_bound() == pytest.approx(0.3)
    rng = np.random.default_rng(0)
    draws = [sample_disturbances(spec, rng) for _ in range(100_000)]
    dap = np.array([d.delta_a_p for d in draws])
    dp = np.array([d.delta_p for d in draws])
    dah = np.array([d.delta_a_h for d in draws])
    assert np.abs(dap).max() <= 0.2
    assert np.abs(dp[:, 0]).max() <= 0.1
    assert np.abs(dp[:, 1]).max() <= 0.2
    assert np.abs(dah).max() <= 0.05
    w = np.array([lumped_disturbance(d, P) for d in draws[:20000]])
    assert np.abs(w).max() <= 0.3


def test_zero_noise_spec():
    spec = DisturbanceSpec(c_w=0, sigma=0, n_p=0, n_h=0, b_s=0, b_v=0)
    d = sample_disturbances(spec, np.random.default_rng(1))
    assert d.delta_a_p == 0 and d.delta_a_h == 0 and not np.any(d.delta_p)


def test_inconsistent_disturbance_spec_rejected():
    with pytest.raises(DomainError):
        DisturbanceSpec(c_w=0.2)


def test_check_constraints_examples():
    c = ConstraintSpec()
    r = check_constraints((0, 0), 0, c)
    assert r.satisfied and list(r.margins.values()) == [2, 5, 5, 3, 3]
    r = check_constraints((-2.1, 0), 0, c)
    assert not r.satisfied and r.violated() == ["x1_min"]
    assert r.margins["x1_min"] == pytest.approx(-0.1)
    r = check_constraints((0, 5), 3, c)
    assert r.satisfied and r.margins["x2_max"] == 0 and r.margins["u_max"] == 0


def test_carfollowing_roundtrip():
    x = CarFollowingState.from_array(np.array([1.5, -2.0]))
    np.testing.assert_array_equal(x.as_array(), [1.5, -2.0])
