"""Small dense solvers: convex QP, discrete Riccati equation, scalar least squares."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .convex_sets import MaxIterations

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max-iter"


class EstimationFailed(RuntimeError):
    pass


@dataclass
class QpProblem:
    """min 0.5 z'Hz + f'z  subject to  G z <= h."""

    H: np.ndarray
    f: np.ndarray
    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.asarray(self.f, dtype=float).ravel()
        n = len(self.f)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, n)
        self.h = np.asarray(self.h, dtype=float).ravel()
        if self.H.shape != (n, n) or len(self.h) != len(self.G):
            raise ValueError("inconsistent QP dimensions")
        if not np.allclose(self.H, self.H.T, atol=1e-9 * max(1.0, np.abs(self.H).max())):
            raise ValueError("H must be symmetric")
        self.H = 0.5 * (self.H + self.H.T)
        if n and np.linalg.eigvalsh(self.H).min() < -1e-10 * max(1.0, np.abs(self.H).max()):
            raise ValueError("H must be positive semidefinite")

    def objective(self, z) -> float:
        return float(0.5 * z @ self.H @ z + self.f @ z)


@dataclass
class QpSolution:
    z_star: np.ndarray
    objective: float
    kkt_residual: float
    status: str
    iterations: int = 0
    y: np.ndarray = field(default=None, repr=False)
    certificate: np.ndarray | None = field(default=None, repr=False)


def kkt_residuals(p: QpProblem, z, y) -> dict[str, float]:
    slack = p.h - p.G @ z
    return {
        "stationarity": float(np.max(np.abs(p.H @ z + p.f + p.G.T @ y), initial=0.0)),
        "primal": float(np.max(-slack, initial=0.0)),
        "dual": float(np.max(-y, initial=0.0)),
        "complementarity": float(np.max(np.abs(y * slack), initial=0.0)),
    }


def _kkt_solve(H, f, GA, hA):
    n, k = H.shape[0], GA.shape[0]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = H
    K[:n, n:] = GA.T
    K[n:, :n] = GA
    rhs = np.concatenate([-f, hA])
    try:
        sol = np.linalg.solve(K, rhs)
        if not np.all(np.isfinite(sol)) or np.linalg.norm(K @ sol - rhs) > 1e-8 * (1 + np.linalg.norm(rhs)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def active_set_refine(p: QpProblem, active, tol: float = 1e-9, max_passes: int = 50):
    """Primal-dual active-set polishing from a guessed active set.

    Returns (z, y) satisfying the KKT conditions to ``tol`` or None.
    """
    A = sorted(set(int(i) for i in active))
    m = len(p.h)
    for _ in range(max_passes):
        GA = p.G[A]
        z, yA = _kkt_solve(p.H, p.f, GA, p.h[A])
        y = np.zeros(m)
        y[A] = yA
        if A and yA.min() < -tol:
            A.pop(int(np.argmin(yA)))
            continue
        viol = p.G @ z - p.h
        if m:
            viol[A] = -np.inf
            worst = int(np.argmax(viol))
            if viol[worst] > tol:
                A = sorted(A + [worst])
                continue
        res = kkt_residuals(p, z, y)
        if max(res.values()) <= max(tol, 1e-12) * 1e3:
            return z, y
        return None
    return None


def dual_active_set(H, f, G, h, Hinv=None, tol: float = 1e-10, max_iter: int = 500):
    """Goldfarb-Idnani dual active-set method for strictly convex QPs.

    Starts at the unconstrained minimiser and adds the most violated
    constraint each outer pass, dropping constraints whose multiplier would
    turn negative.  Active rows stay linearly independent by construction.
    Returns (z, y, status, iterations).
    """
    m = len(h)
    if Hinv is None:
        Hinv = np.linalg.inv(H)
    z = -Hinv @ f
    A: list[int] = []
    u = np.zeros(0)
    hscale = 1.0 + np.abs(h)
    it = 0
    while it < max_iter:
        s = h - G @ z
        if m == 0:
            break
        p = int(np.argmin(s / hscale))
        if s[p] >= -tol * hscale[p]:
            break
        npl = -G[p]
        u_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                break
            if A:
                NA = -G[A].T
                HiN = Hinv @ NA
                r = np.linalg.solve(NA.T @ HiN, HiN.T @ npl)
                zdir = Hinv @ npl - HiN @ r
            else:
                r = np.zeros(0)
                zdir = Hinv @ npl
            t1, k = np.inf, -1
            for j in range(len(A)):
                if r[j] > 1e-14:
                    ratio = u[j] / r[j]
                    if ratio < t1:
                        t1, k = ratio, j
            zn = float(zdir @ npl)
            s_p = h[p] - G[p] @ z
            t2 = -s_p / zn if zn > 1e-14 * (1.0 + npl @ npl) else np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                y = np.zeros(m)
                y[A] = u
                return z, y, INFEASIBLE, it
            if not np.isfinite(t2):
                u = u - t1 * r
                u_p += t1
                A.pop(k)
                u = np.delete(u, k)
                continue
            t = min(t1, t2)
            z = z + t * zdir
            u = u - t * r
            u_p += t
            if t2 <= t1:
                A.append(p)
                u = np.append(u, u_p)
                break
            A.pop(k)
            u = np.delete(u, k)
    y = np.zeros(m)
    if A:
        y[A] = np.maximum(u, 0.0)
    return z, y, (OPTIMAL if it <= max_iter else MAX_ITER), it


class AdmmQpSolver:
    """Operator-splitting QP solver for a fixed (H, G) pair and varying (f, h).

    Over-relaxed ADMM iterations on the scaled problem, adaptive step size,
    warm starts, then active-set polishing of the ADMM estimate.
    """

    def __init__(self, H, G, *, rho: float = 0.1, sigma: float = 1e-6, alpha: float = 1.6,
                 eps: float = 1e-5, tol: float = 1e-6, max_iter: int = 4000,
                 stall_window: int = 500, polish: bool = True):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        n = H.shape[0]
        G = np.asarray(G, dtype=float).reshape(-1, n)
        self.H, self.G = 0.5 * (H + H.T), G
        self.n, self.m = n, G.shape[0]
        # variable and row scaling
        d = np.sqrt(np.maximum(np.diag(self.H), 0.0))
        d = np.where(d > 1e-8, d, 1.0)
        self.E = 1.0 / d
        Gs = G * self.E[None, :]
        rn = np.linalg.norm(Gs, axis=1)
        self.D = np.where(rn > 1e-12, 1.0 / np.maximum(rn, 1e-12), 1.0)
        self.Hs = self.E[:, None] * self.H * self.E[None, :]
        self.Gs = self.D[:, None] * Gs
        self.rho, self.sigma, self.alpha = rho, sigma, alpha
        self.eps, self.tol, self.max_iter = eps, tol, max_iter
        self.stall_window = stall_window
        self.polish = polish
        self._inv_cache: dict[float, np.ndarray] = {}
        ev = np.linalg.eigvalsh(self.H) if n else np.ones(1)
        self._pd = bool(ev.min() > 1e-10 * max(1.0, ev.max()))
        self._Hinv = np.linalg.inv(self.H) if self._pd else None
        self._warm: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def _inverse(self, rho: float) -> np.ndarray:
        key = float(np.round(np.log10(rho), 3))
        inv = self._inv_cache.get(key)
        if inv is None:
            M = self.Hs + self.sigma * np.eye(self.n) + rho * self.Gs.T @ self.Gs
            inv = np.linalg.inv(M)
            self._inv_cache[key] = inv
        return inv

    def reset(self):
        self._warm = None

    def solve(self, f, h, warm_start=None) -> QpSolution:
        p = QpProblem(self.H, f, self.G, h)
        return self._solve(p, warm_start)

    def _solve(self, p: QpProblem, warm_start=None) -> QpSolution:
        n, m = self.n, self.m
        E, D = self.E, self.D
        fs = E * p.f
        hs = D * p.h
        Hs, Gs = self.Hs, self.Gs
        sigma, a = self.sigma, self.alpha
        if warm_start is not None:
            zw = np.asarray(warm_start, dtype=float)
            x = zw / E
            z = Gs @ x
            y = np.zeros(m)
        elif self._warm is not None:
            x, z, y = (v.copy() for v in self._warm)
        else:
            x, z, y = np.zeros(n), np.zeros(m), np.zeros(m)
        rho = self.rho
        inv = self._inverse(rho)
        best_prim = np.inf
        stall = 0
        status = MAX_ITER
        cert = None
        stalled = False
        it = 0
        for it in range(1, self.max_iter + 1):
            xt = inv @ (sigma * x - fs + Gs.T @ (rho * z - y))
            zt = Gs @ xt
            x = a * xt + (1 - a) * x
            zr = a * zt + (1 - a) * z
            z_new = np.minimum(zr + y / rho, hs)
            dy = rho * (zr - z_new)
            y = y + dy
            z = z_new
            if it % 10 == 0 or it == 1:
                Gx = Gs @ x
                Hx = Hs @ x
                Gty = Gs.T @ y
                r_prim = np.max(np.abs(Gx - z), initial=0.0)
                r_dual = np.max(np.abs(Hx + fs + Gty), initial=0.0)
                prim_scale = max(np.max(np.abs(Gx), initial=0.0), np.max(np.abs(z), initial=0.0))
                dual_scale = max(np.max(np.abs(Hx)), np.max(np.abs(Gty), initial=0.0),
                                 np.max(np.abs(fs), initial=0.0))
                if (r_prim <= self.eps * (1 + prim_scale)
                        and r_dual <= self.eps * (1 + dual_scale)):
                    status = OPTIMAL
                    break
                # Farkas certificate from the dual increment
                ndy = np.max(np.abs(dy), initial=0.0)
                if ndy > 1e-10:
                    dyp = np.maximum(dy, 0.0)
                    if (dy.min() >= -1e-9 * ndy
                            and np.max(np.abs(Gs.T @ dyp)) <= 1e-7 * ndy
                            and hs @ dyp < -1e-7 * ndy):
                        status = INFEASIBLE
                        cert = D * dyp
                        break
                if r_prim < best_prim * (1 - 1e-9) or r_prim <= self.eps * (1 + prim_scale):
                    # a primal residual already at tolerance is slow dual convergence, not infeasibility
                    best_prim, stall = min(best_prim, r_prim), 0
                else:
                    stall += 10
                    if stall >= self.stall_window:
                        stalled = True
                        break
                if it % 50 == 0 and r_prim > 0 and r_dual > 0:
                    ratio = np.sqrt((r_prim / (1e-12 + prim_scale)) / (r_dual / (1e-12 + dual_scale)))
                    if ratio > 5 or ratio < 0.2:
                        rho = float(np.clip(rho * ratio, 1e-6, 1e6))
                        inv = self._inverse(rho)
        z_orig = E * x
        y_orig = D * y
        if status == INFEASIBLE:
            self._warm = None
            return QpSolution(z_orig, p.objective(z_orig), np.inf, INFEASIBLE, it, y_orig, cert)
        self._warm = (x.copy(), z.copy(), y.copy())
        # a stalled primal residual only counts as infeasibility if polishing cannot rescue it
        if self.polish or stalled:
            scale = max(1.0, np.max(np.abs(y_orig), initial=0.0))
            guess = np.flatnonzero(y_orig > 1e-7 * scale)
            refined = active_set_refine(p, guess, tol=1e-10)
            if refined is None and self._pd:
                zg, yg, st, _ = dual_active_set(p.H, p.f, p.G, p.h, Hinv=self._Hinv)
                if st == OPTIMAL:
                    refined = zg, yg
                elif st == INFEASIBLE:
                    return QpSolution(zg, p.objective(zg), np.inf, INFEASIBLE, it, yg)
            if refined is not None:
                z_orig, y_orig = refined
                self._warm = (z_orig / E, Gs @ (z_orig / E), y_orig / D)
        res = kkt_residuals(p, z_orig, y_orig)
        kkt = max(res.values())
        if kkt <= self.tol:
            status = OPTIMAL
        elif stalled:
            self._warm = None
            return QpSolution(z_orig, p.objective(z_orig), np.inf, INFEASIBLE, it, y_orig)
        elif status == OPTIMAL:
            status = MAX_ITER
        return QpSolution(z_orig, p.objective(z_orig), kkt, status, it, y_orig)


class DualActiveSetSolver:
    """Fixed (H, G) wrapper around :func:`dual_active_set` with a cached inverse."""

    def __init__(self, H, G, *, tol: float = 1e-6, max_iter: int = 500):
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        self.G = np.asarray(G, dtype=float).reshape(-1, self.H.shape[0])
        self.Hinv = np.linalg.inv(self.H)
        self.tol, self.max_iter = tol, max_iter

    def reset(self):
        pass

    def _solve(self, p: QpProblem, warm_start=None) -> QpSolution:
        z, y, status, it = dual_active_set(p.H, p.f, p.G, p.h, Hinv=self.Hinv,
                                           max_iter=self.max_iter)
        if status == INFEASIBLE:
            return QpSolution(z, p.objective(z), np.inf, status, it, y)
        kkt = max(kkt_residuals(p, z, y).values())
        if kkt > self.tol:
            status = MAX_ITER
        return QpSolution(z, p.objective(z), kkt, status, it, y)

    def solve(self, f, h, warm_start=None) -> QpSolution:
        return self._solve(QpProblem(self.H, f, self.G, h), warm_start)


def solve_qp(p: QpProblem, tol: float = 1e-6, max_iter: int = 4000, warm_start=None) -> QpSolution:
    solver = AdmmQpSolver(p.H, p.G, tol=tol, max_iter=max_iter)
    return solver._solve(p, warm_start)


def solve_dare(A, B, Q, R, tol: float = 1e-10, max_iter: int = 100_000):
    """Fixed-point iteration on the discrete Riccati equation starting at P = Q.

    Returns (P, K) with the LQR law u = K x.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        with np.errstate(over="ignore", invalid="ignore"):
            BtP = B.T @ P
            S = R + BtP @ B
            P_next = Q + A.T @ P @ A - (BtP @ A).T @ np.linalg.solve(S, BtP @ A)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise MaxIterations("Riccati iteration diverged")
        done = np.max(np.abs(P_next - P)) <= tol
        P = P_next
        if done:
            break
    else:
        raise MaxIterations(f"Riccati iteration did not converge in {max_iter} steps")
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return P, K


def riccati_residual(A, B, Q, R, P) -> float:
    A = np.atleast_2d(A)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    R = np.atleast_2d(R)
    BtP = B.T @ P
    rhs = Q + A.T @ P @ A - (BtP @ A).T @ np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.max(np.abs(P - rhs)))


def fit_scalar_nls(residual_fn: Callable[[float], np.ndarray], bracket: tuple[float, float],
                   tol: float = 1e-4, grid_points: int = 101) -> float:
    """argmin over the bracket of ||residual_fn(T)||^2.

    Coarse grid search followed by bounded parabolic/golden refinement
    between the neighbours of the best grid point.
    """
    lo, hi = bracket
    grid = np.linspace(lo, hi, max(grid_points, 50))

    def cost(t: float) -> float:
        r = np.asarray(residual_fn(t), dtype=float)
        return float(r @ r) if np.all(np.isfinite(r)) else np.inf

    costs = np.array([cost(t) for t in grid])
    if not np.any(np.isfinite(costs)):
        raise EstimationFailed("all residuals non-finite on the grid")
    i = int(np.argmin(costs))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(cost, bounds=(a, b), method="bounded",
                          options={"xatol": tol * 1e-2})
    if res.success and np.isfinite(res.fun) and res.fun <= costs[i]:
        return float(res.x)
    return float(grid[i])
