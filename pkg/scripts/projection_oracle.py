"""Seed-averaged random-walk projection of a single overloaded cell in a 1D strip."""
import argparse
import time

import numpy as np

from hardcrowd.geometry import Room, build_grid
from hardcrowd.macro import DensityGrid, ProjectionParams, stochastic_project


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--length", type=int, default=401)
    ap.add_argument("--alpha", type=int, nargs="+", default=[11, 21, 51, 101])
    ap.add_argument("--seeds", type=int, default=100)
    args = ap.parse_args()
    L = args.length
    g = build_grid(Room([[0, 0], [L, 0], [L, 1], [0, 1]]), 1.0)
    print(f"{'alpha':>6s} {'L1':>8s} {'L1/alpha':>9s} {'seconds':>8s}")
    for alpha in args.alpha:
        t0 = time.perf_counter()
        acc = np.zeros(L)
        for s in range(args.seeds):
            rho = np.zeros((1,) + g.shape)
            rho[0, L // 2, 0] = alpha
            out, _ = stochastic_project(DensityGrid.unchecked(g, rho, np.zeros_like(rho)), ProjectionParams(seed=s))
            acc += out.rho[0, :, 0]
        acc /= args.seeds
        target = np.zeros(L)
        lo = L // 2 - (alpha - 1) // 2
        target[lo : lo + alpha] = 1.0
        l1 = np.abs(acc - target).sum()
        print(f"{alpha:6d} {l1:8.3f} {l1 / alpha:9.4f} {time.perf_counter() - t0:8.2f}")


if __name__ == "__main__":
    main()
