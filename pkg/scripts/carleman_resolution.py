"""Per-h Carleman constants of one random bump family at several grid sizes.

Shows how the drift of C0 between the two finest h depends on resolving the
semiclassical carrier (the C2 study).

Usage: python scripts/carleman_resolution.py [seed] [n_functions]
"""

import sys
import time

import numpy as np

from calderon_lab.carleman import BumpFamily, carleman_sweep, per_h_constants
from calderon_lab.geometry import cylinder

HS = [0.2, 0.1, 0.05, 0.025]


def main(seed=2024, n_functions=100, resolutions=((32, 16, 64), (48, 24, 96), (64, 32, 128), (96, 48, 192))):
    print("n1,nr,ntheta," + ",".join(f"C0_h{h}" for h in HS) + ",drift,seconds")
    for res in resolutions:
        t0 = time.perf_counter()
        g = cylinder(resolution=res).grid
        rng = np.random.default_rng(seed)
        fams = [BumpFamily.random(rng, g) for _ in range(n_functions)]
        per_h = per_h_constants(carleman_sweep(g, fams, HS))
        a, b = per_h[0.05], per_h[0.025]
        cols = ",".join(f"{per_h[h]:.5e}" for h in HS)
        print(f"{res[0]},{res[1]},{res[2]},{cols},{abs(a - b) / max(a, b):.4f},{time.perf_counter() - t0:.1f}", flush=True)


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:]]
    main(*args)
