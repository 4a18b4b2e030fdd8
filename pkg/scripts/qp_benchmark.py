"""Time both QP solvers against brute-force active-set enumeration on random problems."""
import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from oracles import qp_exhaustive  # noqa: E402
from test_numerics import random_qp  # noqa: E402

from ecosafe.numerics import DualActiveSetSolver, kkt_residuals, solve_qp  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-n", "--count", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    problems = [random_qp(rng) for _ in range(args.count)]
    ref = [qp_exhaustive(p.H, p.f, p.G, p.h)[1] for p in problems]
    solvers = {"active-set": lambda p: DualActiveSetSolver(p.H, p.G, tol=1e-8)._solve(p),
               "admm": lambda p: solve_qp(p, tol=1e-8, max_iter=20000)}
    for name, solve in solvers.items():
        t0 = time.perf_counter()
        sols = [solve(p) for p in problems]
        dt = time.perf_counter() - t0
        kkt = max(max(kkt_residuals(p, s.z_star, s.y).values()) for p, s in zip(problems, sols))
        gap = max(abs(s.objective - r) / max(1, abs(r)) for s, r in zip(sols, ref))
        print(f"{name:10s} {dt:6.2f} s  worst KKT {kkt:.1e}  worst objective gap {gap:.1e}")


if __name__ == "__main__":
    main()
