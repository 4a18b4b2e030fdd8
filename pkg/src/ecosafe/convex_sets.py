"""Planar convex set algebra for tube MPC.

Bounded sets are vertex polygons (CCW, deduplicated, no collinear triples);
constraint sets that may be unbounded stay in halfspace form ``F x <= g``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

_EPS = 1e-12


class TighteningInfeasible(ValueError):
    """The Pontryagin difference is empty (disturbance set too large)."""

    def __init__(self, msg: str, row: int | None = None):
        super().__init__(msg)
        self.row = row


class NotStable(ValueError):
    pass


class MaxIterations(RuntimeError):
    pass


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points, tol: float = 1e-12) -> np.ndarray:
    """Monotone-chain hull; returns CCW vertices with collinear points removed."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    scale = max(1.0, float(np.max(np.abs(pts))) if pts.size else 1.0)
    pts = np.unique(np.round(pts / (scale * 1e-13)) * (scale * 1e-13), axis=0)
    if len(pts) <= 1:
        return pts

    def turn_too_small(o, a, b):
        # sine of the turn angle, so pruning never moves the boundary by more than tol * edge
        la = np.hypot(a[0] - o[0], a[1] - o[1])
        lb = np.hypot(b[0] - o[0], b[1] - o[1])
        return _cross(o, a, b) <= tol * la * lb

    def half(seq):
        out: list = []
        for p in seq:
            while len(out) >= 2 and turn_too_small(out[-2], out[-1], p):
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) == 0:
        # every point collinear and coincident after rounding
        return pts[:1]
    return hull


@dataclass(frozen=True, eq=False)
class ConvexPolygon:
    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if len(v) == 0:
            raise ValueError("empty polygon")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @classmethod
    def from_points(cls, points) -> "ConvexPolygon":
        return cls(convex_hull(points))

    @classmethod
    def box(cls, lo, hi) -> "ConvexPolygon":
        (x0, y0), (x1, y1) = lo, hi
        return cls.from_points([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])

    @classmethod
    def inf_ball(cls, radius: float) -> "ConvexPolygon":
        return cls.box((-radius, -radius), (radius, radius))

    @classmethod
    def point(cls, p=(0.0, 0.0)) -> "ConvexPolygon":
        return cls(np.array([p], dtype=float))

    def __len__(self) -> int:
        return len(self.vertices)

    def is_valid(self) -> bool:
        v = self.vertices
        n = len(v)
        if n <= 2:
            return n == 1 or not np.allclose(v[0], v[1])
        for i in range(n):
            o, a, b = v[i], v[(i + 1) % n], v[(i + 2) % n]
            if _cross(o, a, b) <= 1e-14 * np.hypot(*(a - o)) * np.hypot(*(b - o)):
                return False
        return len(np.unique(v, axis=0)) == n

    def facets(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit outward normals and offsets ``F x <= g``; empty for degenerate sets."""
        v = self.vertices
        if len(v) < 3:
            return np.zeros((0, 2)), np.zeros(0)
        e = np.roll(v, -1, axis=0) - v
        F = np.column_stack([e[:, 1], -e[:, 0]])
        F /= np.linalg.norm(F, axis=1, keepdims=True)
        g = np.einsum("ij,ij->i", F, v)
        return F, g

    def contains(self, p, tol: float = 1e-9) -> bool:
        F, g = self.facets()
        if len(F) == 0:
            return _in_degenerate(self.vertices, np.asarray(p, float), tol)
        return bool(np.all(F @ np.asarray(p, float) <= g + tol))

    def scale(self, c: float) -> "ConvexPolygon":
        if c == 0:
            return ConvexPolygon.point()
        return ConvexPolygon(self.vertices * c) if c > 0 else linear_map(c * np.eye(2), self)

    def to_json(self) -> str:
        return json.dumps(self.vertices.tolist())

    @classmethod
    def from_json(cls, text: str) -> "ConvexPolygon":
        return cls.from_points(json.loads(text))


def _in_degenerate(v: np.ndarray, p: np.ndarray, tol: float) -> bool:
    if len(v) == 1:
        return bool(np.linalg.norm(p - v[0]) <= tol)
    a, b = v[0], v[1]
    d = b - a
    t = np.clip(np.dot(p - a, d) / np.dot(d, d), 0.0, 1.0)
    return bool(np.linalg.norm(a + t * d - p) <= tol)


def support(P: ConvexPolygon, d) -> float:
    d = np.asarray(d, dtype=float).ravel()
    if not np.any(d):
        raise ValueError("support direction must be nonzero")
    return float(np.max(P.vertices @ d))


def _start_index(v: np.ndarray) -> int:
    # lowest y, then lowest x
    return int(np.lexsort((v[:, 0], v[:, 1]))[0])


def _edge_sorted(v: np.ndarray) -> np.ndarray:
    i = _start_index(v)
    return np.roll(v, -i, axis=0)


def minkowski_sum(P: ConvexPolygon, Q: ConvexPolygon) -> ConvexPolygon:
    """Merge the edge sequences of both polygons by polar angle."""
    if len(P) == 1:
        return ConvexPolygon(Q.vertices + P.vertices[0])
    if len(Q) == 1:
        return ConvexPolygon(P.vertices + Q.vertices[0])
    a, b = _edge_sorted(P.vertices), _edge_sorted(Q.vertices)
    na, nb = len(a), len(b)
    a = np.vstack([a, a[:2]])
    b = np.vstack([b, b[:2]])
    out = []
    i = j = 0
    while i < na or j < nb:
        out.append(a[i] + b[j])
        c = _cross((0.0, 0.0), a[i + 1] - a[i], b[j + 1] - b[j])
        if j >= nb or (i < na and c > 0):
            i += 1
        elif i >= na or c < 0:
            j += 1
        else:
            i += 1
            j += 1
    return ConvexPolygon(convex_hull(out))


def linear_map(M, P: ConvexPolygon) -> ConvexPolygon:
    """Image of P under a 2x2 map (or a 1x2 map, returning an interval on the x-axis)."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape == (1, 2):
        vals = P.vertices @ M[0]
        return ConvexPolygon.from_points([[vals.min(), 0.0], [vals.max(), 0.0]])
    return ConvexPolygon.from_points(P.vertices @ M.T)


def interval_image(K, P: ConvexPolygon) -> tuple[float, float]:
    """(min, max) of K x over P for a 1x2 gain."""
    vals = P.vertices @ np.asarray(K, dtype=float).ravel()
    return float(vals.min()), float(vals.max())


@dataclass(frozen=True, eq=False)
class HalfspaceSet:
    F: np.ndarray
    g: np.ndarray
    bounded: bool = False

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float)).reshape(-1, 2)
        g = np.asarray(self.g, dtype=float).ravel()
        if len(F) != len(g):
            raise ValueError("row count mismatch")
        norms = np.linalg.norm(F, axis=1)
        if np.any(norms <= _EPS):
            raise ValueError("zero row in halfspace set")
        F, g = F / norms[:, None], g / norms
        F.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "g", g)

    def contains(self, x, tol: float = 1e-9) -> bool:
        return bool(np.all(self.F @ np.asarray(x, float) <= self.g + tol))

    def margins(self, x) -> np.ndarray:
        return self.g - self.F @ np.asarray(x, float)

    def is_empty(self) -> bool:
        res = linprog(np.zeros(2), A_ub=self.F, b_ub=self.g, bounds=[(None, None)] * 2,
                      method="highs")
        return res.status == 2

    def to_dict(self) -> dict:
        return {"F": self.F.tolist(), "g": self.g.tolist(), "bounded": self.bounded}


def pontryagin_diff(X: HalfspaceSet, Z: ConvexPolygon) -> HalfspaceSet:
    g = np.array([X.g[i] - support(Z, X.F[i]) for i in range(len(X.g))])
    out = HalfspaceSet(X.F, g, X.bounded)
    if out.is_empty():
        worst = int(np.argmin(g))
        raise TighteningInfeasible(
            f"tightened set is empty (row {worst}: offset {X.g[worst]:.4g} -> {g[worst]:.4g})",
            row=worst,
        )
    return out


def mrpi_approx(A_K, W: ConvexPolygon, eps: float = 1e-3, max_s: int = 500) -> ConvexPolygon:
    """Outer eps-approximation of the minimal robust positively invariant set.

    Finds the smallest s with A_K^s W inside alpha W for
    alpha <= eps / (eps + M(s)), then returns (1 - alpha)^-1 (W + A_K W + ... + A_K^{s-1} W).
    ``W`` must contain the origin in its interior (or be the origin).
    """
    A_K = np.asarray(A_K, dtype=float)
    rho = max(abs(np.linalg.eigvals(A_K)))
    if rho >= 1.0:
        raise NotStable(f"spectral radius {rho:.6g} >= 1")
    if len(W) == 1:
        if np.any(W.vertices[0]):
            raise ValueError("W must contain the origin")
        return ConvexPolygon.point()
    Fw, gw = W.facets()
    if len(Fw) == 0 or np.any(gw <= 0):
        raise ValueError("W must contain the origin in its interior")
    axes = np.vstack([np.eye(2), -np.eye(2)])
    Fs = W
    As = np.eye(2)
    M = np.zeros(4)
    M += [support(W, d) for d in axes]
    for s in range(1, max_s + 1):
        As_next = A_K @ As  # A_K^s
        img = linear_map(As_next, W)
        alpha = max(support(img, Fw[i]) / gw[i] for i in range(len(gw)))
        if alpha <= eps / (eps + M.max()):
            return Fs.scale(1.0 / (1.0 - alpha))
        Fs = minkowski_sum(Fs, img)
        M += [support(img, d) for d in axes]
        As = As_next
    raise MaxIterations(f"mRPI search exceeded s={max_s}")


def invariance_check(A_K, Z: ConvexPolygon, W: ConvexPolygon, tol: float = 1e-9) -> tuple[bool, float]:
    """Check A_K Z + W inside Z along Z's facet normals; returns (ok, worst slack)."""
    A_K = np.asarray(A_K, dtype=float)
    F, g = Z.facets()
    if len(F) == 0:
        img = minkowski_sum(linear_map(A_K, Z), W)
        ok = all(Z.contains(v, tol) for v in img.vertices)
        return ok, 0.0 if ok else -float(np.max(np.abs(img.vertices - Z.vertices[0])))
    AZ = linear_map(A_K, Z)
    slack = np.array([g[i] - support(AZ, F[i]) - support(W, F[i]) for i in range(len(g))])
    worst = float(slack.min())
    return worst >= -tol, worst


def contains_sum_check(X: HalfspaceSet, Xbar: HalfspaceSet, Z: ConvexPolygon) -> float:
    """Worst slack of (Xbar + Z) inside X for sets sharing row normals."""
    return float(np.min(X.g - Xbar.g - np.array([support(Z, f) for f in X.F])))
