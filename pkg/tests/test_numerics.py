import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecosafe.convex_sets import MaxIterations
from ecosafe.numerics import (AdmmQpSolver, DualActiveSetSolver, EstimationFailed, QpProblem,
                              fit_scalar_nls, kkt_residuals, riccati_residual, solve_dare, solve_qp)
from ecosafe.core_model import ModelParams
from oracles import idm_reference, qp_exhaustive, scalar_dare


def random_qp(rng, n_max=20, m_max=6):
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    G = rng.normal(size=(m, n))
    h = G @ rng.normal(size=n) + rng.uniform(0, 1, m)
    return QpProblem(H, 3 * rng.normal(size=n), G, h)


def gi_solve(p):
    return DualActiveSetSolver(p.H, p.G, tol=1e-8)._solve(p)


SOLVERS = {"admm": lambda p: solve_qp(p, tol=1e-8, max_iter=20000), "active-set": gi_solve}


@pytest.mark.parametrize("solver", SOLVERS)
def test_qp_hand_examples(solver):
    s = SOLVERS[solver](QpProblem([[2.0]], [-2.0], [[1.0]], [0.5]))
    assert s.status == "optimal" and s.z_star[0] == pytest.approx(0.5, abs=1e-8)
    s = SOLVERS[solver](QpProblem(np.eye(2), [-2, -2], [[1, 1]], [1]))
    np.testing.assert_allclose(s.z_star, [0.5, 0.5], atol=1e-8)


@pytest.mark.parametrize("solver", SOLVERS)
def test_qp_unconstrained_matches_linear_solve(solver):
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(1, 10))
        M = rng.normal(size=(n, n))
        H = M @ M.T + np.eye(n)
        f = rng.normal(size=n)
        s = SOLVERS[solver](QpProblem(H, f, np.zeros((1, n)), [1.0]))
        np.testing.assert_allclose(s.z_star, -np.linalg.solve(H, f), atol=1e-8)


@pytest.mark.parametrize("solver", SOLVERS)
def test_qp_matches_exhaustive_oracle(solver):
    rng = np.random.default_rng(11)
    for _ in range(150):
        p = random_qp(rng)
        s = SOLVERS[solver](p)
        z, obj = qp_exhaustive(p.H, p.f, p.G, p.h)
        assert s.status == "optimal"
        assert max(kkt_residuals(p, s.z_star, s.y).values()) <= 1e-6
        assert s.objective == pytest.approx(obj, abs=1e-6 * max(1, abs(obj)))


@pytest.mark.parametrize("solver", SOLVERS)
def test_qp_infeasible_flagged(solver):
    p = QpProblem(np.eye(2), [0, 0], [[1, 0], [-1, 0]], [-1, -1])
    assert SOLVERS[solver](p).status == "infeasible"


def test_admm_infeasible_has_certificate_or_flag():
    p = QpProblem(np.eye(1), [0], [[1], [-1]], [-1, -1])
    s = AdmmQpSolver(p.H, p.G, polish=False)._solve(p)
    assert s.status == "infeasible"
    if s.certificate is not None:
        y = s.certificate
        assert np.all(y >= 0) and p.h @ y < 0 and np.allclose(p.G.T @ y, 0, atol=1e-6)


def test_admm_warm_start_reuses_state():
    rng = np.random.default_rng(5)
    p = random_qp(rng, 8, 6)
    solver = AdmmQpSolver(p.H, p.G, polish=False)
    first = solver.solve(p.f, p.h)
    second = solver.solve(p.f, p.h)
    assert second.iterations <= first.iterations


def test_qp_rejects_bad_hessian():
    with pytest.raises(ValueError):
        QpProblem([[-1.0]], [0], [[1]], [1])
    with pytest.raises(ValueError):
        QpProblem([[1, 2], [0, 1]], [0, 0], [[1, 0]], [1])
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), [0, 0], [[1, 0]], [1, 2])


def test_dare_scalar_closed_form():
    P, K = solve_dare([[0.5]], [[1.0]], [[1.0]], 1.0)
    p, k = scalar_dare(0.5, 1.0, 1.0, 1.0)
    assert P[0, 0] == pytest.approx(p, abs=1e-9) and K[0, 0] == pytest.approx(k, abs=1e-9)
    assert P[0, 0] == pytest.approx(1.1328, abs=1e-4) and K[0, 0] == pytest.approx(-0.2656, abs=1e-4)


def test_dare_deadbeat_plant():
    Q = np.diag([2.0, 3.0])
    P, K = solve_dare(np.zeros((2, 2)), [[1.0], [0.5]], Q, 1.0)
    np.testing.assert_allclose(P, Q)
    np.testing.assert_allclose(K, 0)


def test_dare_vehicle_plant():
    m = ModelParams()
    P, K = solve_dare(m.A, m.Bc, np.eye(2), 1.0)
    assert max(abs(np.linalg.eigvals(m.A + np.outer(m.Bc, K)))) < 1
    assert riccati_residual(m.A, m.Bc, np.eye(2), 1.0, P) <= 1e-9


def test_dare_unstabilizable_raises():
    with pytest.raises(MaxIterations):
        solve_dare([[2.0, 0], [0, 0.5]], [[0.0], [1.0]], np.eye(2), 1.0, max_iter=5000)


@given(st.integers(0, 100_000))
def test_dare_gain_stabilizes(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 2))
    B = rng.normal(size=(2, 1))
    if abs(np.linalg.det(np.hstack([B, A @ B]))) < 0.05:
        return
    Q = np.diag(rng.uniform(0.1, 3, 2))
    P, K = solve_dare(A, B, Q, float(rng.uniform(0.1, 3)))
    assert max(abs(np.linalg.eigvals(A + B @ K))) < 1
    assert np.max(np.abs(P - P.T)) <= 1e-12


def test_nls_examples():
    assert fit_scalar_nls(lambda T: np.array([T - 1.2]), (0.5, 3)) == pytest.approx(1.2, abs=1e-4)
    assert fit_scalar_nls(lambda T: np.array([(T - 2) ** 2 + 0.1]), (0.5, 3)) == pytest.approx(2.0, abs=1e-3)


def test_nls_idm_self_consistency():
    rng = np.random.default_rng(0)
    v = rng.uniform(5, 20, 200)
    dv = rng.normal(0, 1, 200)
    s = rng.uniform(15, 50, 200)
    a = np.array([idm_reference(*row, 0.8) for row in zip(v, dv, s)])

    def residual(T):
        return np.array([idm_reference(*row, T) for row in zip(v, dv, s)]) - a

    assert fit_scalar_nls(residual, (0.5, 3)) == pytest.approx(0.8, abs=0.01)


def test_nls_all_nonfinite():
    with pytest.raises(EstimationFailed):
        fit_scalar_nls(lambda T: np.array([np.nan]), (0.5, 3))


@settings(max_examples=40)
@given(st.floats(0.6, 2.9), st.floats(0.0, 2.0), st.integers(1, 4))
def test_nls_refinement_never_worse_than_grid(c, bump, power):
    def residual(T):
        return np.array([abs(T - c) ** power + bump * np.sin(5 * T)])

    t = fit_scalar_nls(residual, (0.5, 3))
    grid = np.linspace(0.5, 3, 101)
    assert float(residual(t) @ residual(t)) <= min(float(residual(g) @ residual(g)) for g in grid) + 1e-15
