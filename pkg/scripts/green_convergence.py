"""Green identity residual against grid size (the C1 study).

Usage: python scripts/green_convergence.py [N ...]   (default 24 48 96)
"""

import sys
import time

import numpy as np

from calderon_lab.geometry import cylinder
from calderon_lab.pde import GridFunction, Potential, greens_terms, solve_dirichlet
from calderon_lab.phantoms import smooth_bump


def residual(n):
    a = np.array([0.6, 0.8, 0.0])
    b = np.array([-0.6, 0.0, 0.8])
    g = cylinder(resolution=(n, n // 2, 2 * n)).grid
    X1, X2, X3 = g.coords
    q1 = Potential(g, 1.0 + 2.0 * smooth_bump(np.sqrt(X1**2 + X2**2 + X3**2) / 0.4))
    q2 = Potential.constant(g, 1.0)
    u2 = GridFunction(g, np.exp(b[0] * X1 + b[1] * X2 + b[2] * X3))
    e1 = np.exp(a[0] * X1 + a[1] * X2 + a[2] * X3)
    u1 = solve_dirichlet(g, q1, e1)
    vol, bnd = greens_terms(q1, q2, u1, u2, GridFunction(g, e1))
    return g.size, abs(vol - bnd) / abs(vol)


def main(ns):
    prev = None
    print("N,nodes,relative_residual,order,seconds")
    for n in ns:
        t0 = time.perf_counter()
        size, r = residual(n)
        order = "" if prev is None else f"{np.log(prev[1] / r) / np.log(n / prev[0]):.3f}"
        print(f"{n},{size},{r:.6e},{order},{time.perf_counter() - t0:.1f}", flush=True)
        prev = (n, r)


if __name__ == "__main__":
    main([int(a) for a in sys.argv[1:]] or [24, 48, 96])
