"""Tube-based robust MPC used as a safety filter for a learned acceleration command.

Offline: LQR gain and terminal weight, the mRPI tube cross-section ``Z``,
tightened state/input sets and a terminal set.  Online: a condensed QP whose
first nominal input is pulled toward the learner's action, followed by the
tube feedback law ``u_s = ubar_0 + K (x - xbar_0)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .convex_sets import (ConvexPolygon, HalfspaceSet, TighteningInfeasible, interval_image,
                          invariance_check, mrpi_approx, pontryagin_diff, support)
from .core_model import ConstraintSpec, DisturbanceSpec, ModelParams
from .numerics import OPTIMAL, AdmmQpSolver, DualActiveSetSolver, QpProblem, solve_dare


class TerminalSetEmpty(ValueError):
    pass


class CertificationFailed(RuntimeError):
    """The safety QP had no certified solution; ``backup`` holds the fallback action."""

    def __init__(self, msg: str, backup: "CertifiedAction | None"):
        super().__init__(msg)
        self.backup = backup


@dataclass(frozen=True)
class MpcWeights:
    N: int = 20
    Q: tuple = ((1.0, 0.0), (0.0, 1.0))
    R: float = 1.0
    Rl: float = 50.0


@dataclass(eq=False)
class RmpcConfig:
    N: int
    Qw: np.ndarray
    Rw: float
    Pw: np.ndarray
    Rl: float
    K: np.ndarray
    Z: ConvexPolygon
    W: ConvexPolygon
    X: HalfspaceSet
    Xbar: HalfspaceSet
    U: tuple[float, float]
    Ubar: tuple[float, float]
    Xf: HalfspaceSet
    model: ModelParams
    constraints: ConstraintSpec
    backoff: float = 1e-7

    @property
    def A_K(self) -> np.ndarray:
        return self.model.A + np.outer(self.model.Bc, self.K)

    def with_tracking_weight(self, Rl: float) -> "RmpcConfig":
        kw = dict(self.__dict__)
        kw["Rl"] = Rl
        return RmpcConfig(**kw)

    def summary(self) -> dict:
        return {
            "N": self.N,
            "K": self.K.tolist(),
            "P": self.Pw.tolist(),
            "Z_vertices": self.Z.vertices.tolist(),
            "X": self.X.to_dict(),
            "Xbar": self.Xbar.to_dict(),
            "U": list(self.U),
            "Ubar": list(self.Ubar),
            "Xf": self.Xf.to_dict(),
        }


def maximal_admissible_set(A_K, C, d, max_steps: int = 200, tol: float = 1e-9) -> HalfspaceSet:
    """Largest set inside {C x <= d} invariant under x+ = A_K x (Gilbert-Tan)."""
    C = np.asarray(C, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise TerminalSetEmpty("constraint set does not contain the origin")
    rows, offs = [C], [d]
    At = np.eye(2)
    for _ in range(max_steps):
        At = A_K @ At
        cand = C @ At
        Fcur, gcur = np.vstack(rows), np.concatenate(offs)
        redundant = True
        for c, off in zip(cand, d):
            res = linprog(-c, A_ub=Fcur, b_ub=gcur, bounds=[(None, None)] * 2, method="highs")
            if res.status == 2:
                raise TerminalSetEmpty("admissible set became empty")
            if res.status != 0 or -res.fun > off + tol:
                redundant = False
                break
        if redundant:
            return _prune(Fcur, gcur)
        rows.append(cand)
        offs.append(d)
    raise TerminalSetEmpty(f"no finite determination within {max_steps} steps")


def _prune(F, g, tol: float = 1e-9) -> HalfspaceSet:
    keep = list(range(len(g)))
    for i in range(len(g) - 1, -1, -1):
        others = [k for k in keep if k != i]
        if not others:
            continue
        res = linprog(-F[i], A_ub=F[others], b_ub=g[others], bounds=[(None, None)] * 2,
                      method="highs")
        if res.status == 0 and -res.fun <= g[i] + tol:
            keep = others
    return HalfspaceSet(F[keep], g[keep], bounded=True)


def build_config(cs: ConstraintSpec, ds: DisturbanceSpec, model: ModelParams,
                 weights: MpcWeights = MpcWeights(), eps: float = 1e-3,
                 backoff: float = 1e-7) -> RmpcConfig:
    Q = np.asarray(weights.Q, dtype=float)
    P, K = solve_dare(model.A, model.Bc, Q, weights.R)
    K = K.reshape(1, 2)
    A_K = model.A + model.Bc[:, None] @ K
    W = ConvexPolygon.inf_ball(ds.c_w) if ds.c_w > 0 else ConvexPolygon.point()
    Z = mrpi_approx(A_K, W, eps)
    X = HalfspaceSet(*cs.state_halfspaces())
    Xbar = pontryagin_diff(X, Z)
    lo, hi = interval_image(K, Z)
    ub_hi = cs.u_max - hi
    ub_lo = -cs.u_min - lo
    if ub_hi <= ub_lo:
        raise TighteningInfeasible(f"tightened input set empty: [{ub_lo:.4g}, {ub_hi:.4g}]", row=None)
    C = np.vstack([Xbar.F, K, -K])
    d = np.concatenate([Xbar.g, [ub_hi, -ub_lo]])
    Xf = maximal_admissible_set(A_K, C, d)
    return RmpcConfig(
        N=weights.N, Qw=Q, Rw=float(weights.R), Pw=P, Rl=float(weights.Rl), K=K.ravel(),
        Z=Z, W=W, X=X, Xbar=Xbar, U=(-cs.u_min, cs.u_max), Ubar=(ub_lo, ub_hi), Xf=Xf,
        model=model, constraints=cs, backoff=backoff,
    )


def verify_config(cfg: RmpcConfig) -> dict[str, float]:
    """Worst-case slacks of the structural tube-MPC conditions (>= 0 means satisfied)."""
    ok, inv = invariance_check(cfg.A_K, cfg.Z, cfg.W)
    state = float(np.min(cfg.X.g - cfg.Xbar.g - np.array([support(cfg.Z, f) for f in cfg.X.F])))
    lo, hi = interval_image(cfg.K, cfg.Z)
    inp = min(cfg.U[1] - (cfg.Ubar[1] + hi), (cfg.Ubar[0] + lo) - cfg.U[0])
    # Xf inside Xbar and K Xf inside Ubar
    worst_f = np.inf
    for c, off in [(f, g) for f, g in zip(cfg.Xbar.F, cfg.Xbar.g)] + [
            (cfg.K, cfg.Ubar[1]), (-cfg.K, -cfg.Ubar[0])]:
        res = linprog(-np.asarray(c), A_ub=cfg.Xf.F, b_ub=cfg.Xf.g,
                      bounds=[(None, None)] * 2, method="highs")
        worst_f = min(worst_f, off + res.fun if res.status == 0 else -np.inf)
    # Xf invariance under A_K
    worst_inv = np.inf
    for f, g in zip(cfg.Xf.F, cfg.Xf.g):
        res = linprog(-(f @ cfg.A_K), A_ub=cfg.Xf.F, b_ub=cfg.Xf.g,
                      bounds=[(None, None)] * 2, method="highs")
        worst_inv = min(worst_inv, g + res.fun if res.status == 0 else -np.inf)
    rho = float(max(abs(np.linalg.eigvals(cfg.A_K))))
    return {
        "spectral_radius_margin": 1.0 - rho,
        "mrpi_invariance": inv,
        "state_tightening": state,
        "input_tightening": float(inp),
        "terminal_admissible": float(worst_f),
        "terminal_invariance": float(worst_inv),
    }


def predict_pv_profile(abar_p_now: float, N: int, n_hold: int = 4) -> np.ndarray:
    """Hold the current predicted PV acceleration, then ramp linearly to 0 at step N-1."""
    prof = np.full(N, float(abar_p_now))
    if N > n_hold:
        span = N - n_hold
        i = np.arange(n_hold, N)
        prof[n_hold:] = abar_p_now * (N - 1 - i) / span
    return prof


@dataclass
class CondensedQp:
    """Horizon matrices: stacked states xbar = S z + Gamma abar for z = (xbar_0, ubar)."""

    S: np.ndarray       # (N+1, 2, n)
    Gamma: np.ndarray   # (N+1, 2, N)
    H: np.ndarray
    f_a: np.ndarray     # f = f_a @ abar + f_u * u_L
    f_u: np.ndarray
    G: np.ndarray
    h0: np.ndarray      # h = h0 + h_a @ abar + h_x @ x_meas
    h_a: np.ndarray
    h_x: np.ndarray


def condense(cfg: RmpcConfig) -> CondensedQp:
    N = cfg.N
    A, Bc, B = cfg.model.A, cfg.model.Bc, cfg.model.B
    n = N + 2
    S = np.zeros((N + 1, 2, n))
    Gam = np.zeros((N + 1, 2, N))
    S[0, :, :2] = np.eye(2)
    for i in range(N):
        S[i + 1] = A @ S[i]
        S[i + 1, :, 2 + i] += Bc
        Gam[i + 1] = A @ Gam[i]
        Gam[i + 1, :, i] += B
    Qs = [cfg.Qw] * N + [cfg.Pw]
    Hq = sum(S[i].T @ Qs[i] @ S[i] for i in range(N + 1))
    Hq[2:, 2:] += cfg.Rw * np.eye(N)
    Hq[2, 2] += cfg.Rl
    H = 2.0 * Hq
    f_a = 2.0 * sum(S[i].T @ Qs[i] @ Gam[i] for i in range(N + 1))
    f_u = np.zeros(n)
    f_u[2] = -2.0 * cfg.Rl

    Gs, h0s, has, hxs = [], [], [], []
    Fx, gx = cfg.Xbar.F, cfg.Xbar.g
    for i in range(N):
        Gs.append(Fx @ S[i])
        h0s.append(gx)
        has.append(-Fx @ Gam[i])
        hxs.append(np.zeros((len(gx), 2)))
    E = np.zeros((2 * N, n))
    E[:N, 2:] = np.eye(N)
    E[N:, 2:] = -np.eye(N)
    Gs.append(E)
    h0s.append(np.concatenate([np.full(N, cfg.Ubar[1]), np.full(N, -cfg.Ubar[0])]))
    has.append(np.zeros((2 * N, N)))
    hxs.append(np.zeros((2 * N, 2)))
    Ff, gf = cfg.Xf.F, cfg.Xf.g
    Gs.append(Ff @ S[N])
    h0s.append(gf)
    has.append(-Ff @ Gam[N])
    hxs.append(np.zeros((len(gf), 2)))
    # tube: x_meas - xbar_0 in Z
    Fz, gz = cfg.Z.facets()
    if len(Fz) == 0:
        # point (or segment) tube collapses to equality with the nominal state
        Fz = np.vstack([np.eye(2), -np.eye(2)])
        gz = Fz @ cfg.Z.vertices.mean(axis=0) if len(cfg.Z) == 1 else np.array(
            [support(cfg.Z, r) for r in Fz])
    Gz = np.zeros((len(gz), n))
    Gz[:, :2] = -Fz
    Gs.append(Gz)
    h0s.append(gz)
    has.append(np.zeros((len(gz), N)))
    hxs.append(-Fz)
    G = np.vstack(Gs)
    h0 = np.concatenate(h0s) - cfg.backoff
    return CondensedQp(S, Gam, H, f_a, f_u, G, h0, np.vstack(has), np.vstack(hxs))


def assemble_qp(x_meas, u_L: float, abar_p_profile, cfg: RmpcConfig,
                cq: CondensedQp | None = None) -> QpProblem:
    cq = cq or condense(cfg)
    abar = np.asarray(abar_p_profile, dtype=float)
    if abar.shape != (cfg.N,):
        raise ValueError(f"PV profile must have length N={cfg.N}")
    f = cq.f_a @ abar + cq.f_u * u_L
    h = cq.h0 + cq.h_a @ abar + cq.h_x @ np.asarray(x_meas, dtype=float)
    return QpProblem(cq.H, f, cq.G, h)


@dataclass
class CertifiedAction:
    u_s: float
    ubar0: float
    xbar0: np.ndarray
    plan_x: np.ndarray = field(repr=False)
    plan_u: np.ndarray = field(repr=False)
    qp_status: str
    iterations: int = 0
    tube_margin: float = 0.0
    backup: bool = False

    def diagnostics(self, u_L: float) -> dict:
        return {"qp_status": self.qp_status, "iterations": self.iterations, "u_L": u_L,
                "u_s": self.u_s, "tube_margin": self.tube_margin, "backup": self.backup}


class SafetyFilter:
    """Per-vehicle certification state: QP solver with warm start and backup plan."""

    def __init__(self, cfg: RmpcConfig, method: str = "active-set", **solver_opts):
        self.cfg = cfg
        self.cq = condense(cfg)
        if method == "admm":
            self.solver = AdmmQpSolver(self.cq.H, self.cq.G, **solver_opts)
        elif method == "active-set":
            self.solver = DualActiveSetSolver(self.cq.H, self.cq.G, **solver_opts)
        else:
            raise ValueError(f"unknown QP method {method!r}")
        self.Fz, self.gz = cfg.Z.facets()
        self._last: CertifiedAction | None = None
        self._last_profile: np.ndarray | None = None

    def reset(self):
        self._last = None
        self._last_profile = None
        self.solver.reset()

    def tube_margin(self, x, xbar0) -> float:
        if len(self.Fz) == 0:
            return -float(np.max(np.abs(np.asarray(x) - xbar0 - self.cfg.Z.vertices.mean(axis=0))))
        return float(np.min(self.gz - self.Fz @ (np.asarray(x) - xbar0)))

    def _action(self, x, xbar0, ubar, abar, status, iters, backup=False) -> CertifiedAction:
        cq = self.cq
        z = np.concatenate([xbar0, ubar])
        plan_x = np.einsum("kij,j->ki", cq.S, z) + np.einsum("kij,j->ki", cq.Gamma, abar)
        u_s = float(ubar[0] + self.cfg.K @ (np.asarray(x, float) - xbar0))
        return CertifiedAction(u_s, float(ubar[0]), np.asarray(xbar0, float), plan_x,
                               np.asarray(ubar, float), status, iters,
                               self.tube_margin(x, xbar0), backup)

    def _shifted_warm(self) -> np.ndarray | None:
        last = self._last
        if last is None:
            return None
        u_next = np.append(last.plan_u[1:], self.cfg.K @ last.plan_x[-1])
        return np.concatenate([last.plan_x[1], u_next])

    def backup_action(self, x) -> CertifiedAction | None:
        """Previous plan shifted by one step with terminal feedback appended."""
        last, prof = self._last, self._last_profile
        if last is None:
            return None
        ubar = np.append(last.plan_u[1:], self.cfg.K @ last.plan_x[-1])
        abar = np.append(prof[1:], 0.0)
        return self._action(x, last.plan_x[1], ubar, abar, "backup", 0, backup=True)

    def certify(self, x_meas, u_L: float, abar_p_profile) -> CertifiedAction:
        cq = self.cq
        abar = np.asarray(abar_p_profile, dtype=float)
        x = np.asarray(x_meas, dtype=float)
        f = cq.f_a @ abar + cq.f_u * u_L
        h = cq.h0 + cq.h_a @ abar + cq.h_x @ x
        p = QpProblem.__new__(QpProblem)
        p.H, p.f, p.G, p.h = cq.H, f, cq.G, h
        sol = self.solver._solve(p, self._shifted_warm())
        if sol.status != OPTIMAL:
            backup = self.backup_action(x)
            if backup is not None:
                self._last, self._last_profile = backup, np.append(self._last_profile[1:], 0.0)
            raise CertificationFailed(f"safety QP {sol.status} (kkt={sol.kkt_residual:.2e})", backup)
        z = sol.z_star
        act = self._action(x, z[:2], z[2:], abar, sol.status, sol.iterations)
        self._last, self._last_profile = act, abar
        return act


def certify(x_meas, u_L: float, abar_p_profile, cfg: RmpcConfig) -> CertifiedAction:
    """Stateless certification (no warm start or backup memory)."""
    return SafetyFilter(cfg).certify(x_meas, u_L, abar_p_profile)
