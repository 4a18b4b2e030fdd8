"""Independent reference computations used by the tests (deliberately naive)."""
from itertools import combinations

import numpy as np


def qp_exhaustive(H, f, G, h, tol=1e-9):
    """Optimum of a strictly convex QP by enumerating candidate active sets.

    For each subset of at most n rows, solve the equality-constrained KKT
    system and keep the primal-feasible point with nonnegative multipliers.
    Returns (z, objective) or None if infeasible.
    """
    n, m = len(f), len(h)
    best = None
    for k in range(0, min(n, m) + 1):
        for S in combinations(range(m), k):
            S = list(S)
            GA = G[S]
            K = np.block([[H, GA.T], [GA, np.zeros((k, k))]]) if k else H
            rhs = np.concatenate([-f, h[S]]) if k else -f
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            z, y = sol[:n], sol[n:]
            if np.any(y < -tol) or np.any(G @ z - h > tol * (1 + np.abs(h))):
                continue
            obj = 0.5 * z @ H @ z + f @ z
            if best is None or obj < best[1]:
                best = (z, obj)
    return best


def power_bruteforce(v, a, p):
    """Direct double sum of p[i, j] v^i a^j."""
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            total += p[i, j] * v**i * a**j
    return total


def support_points(points, d):
    return float(np.max(np.asarray(points) @ np.asarray(d)))


def scalar_dare(a, b, q, r):
    """Positive root of the scalar Riccati equation and the matching gain."""
    # p = q + a^2 p - (a b p)^2 / (r + b^2 p)  ->  b^2 p^2 + (r - a^2 r - q b^2) p - q r = 0
    A2 = b * b
    B1 = r - a * a * r - q * b * b
    C0 = -q * r
    p = (-B1 + np.sqrt(B1 * B1 - 4 * A2 * C0)) / (2 * A2)
    k = -(a * b * p) / (r + b * b * p)
    return p, k


def idm_reference(v, dv, s, T, a0=4.0, delta=4.0, vd=25.0, s0=2.0, b0=5.0):
    s_star = s0 + max(0.0, T * v + v * dv / (2.0 * np.sqrt(a0 * b0)))
    return a0 * (1 - (v / vd) ** delta - (s_star / s) ** 2)
