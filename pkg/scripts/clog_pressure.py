"""Corridor clog: where the macro odometer pressure peaks, and the micro contact pressures."""
import argparse
import copy
from pathlib import Path

import numpy as np

from hardcrowd import io
from hardcrowd.analysis import argmax_in_interior
from hardcrowd.config import load_scenario
from hardcrowd.macro import DensityGrid, saturated_mask
from hardcrowd.runner import run_macro, run_micro

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=ROOT / "configs/clog.yaml")
    ap.add_argument("--window", type=int, nargs=2, default=[20, 200], help="first and last step of the average")
    ap.add_argument("--out", help="write the averaged pressure as CSV and PGM here")
    args = ap.parse_args()
    s = load_scenario(args.config)
    micro = run_micro(s)
    print(f"micro: min contact pressure {micro.min_pressure:.3g}, max {micro.metrics['max_pressure'].max():.3g}")
    ms = copy.deepcopy(s)
    ms.output.frame_stride = 1
    mac = run_macro(ms, keep_odometers=True)
    k0, k1 = args.window
    rho = {st: r for st, _, r, _ in mac.frames}
    steps = [k for k in range(k0, k1 + 1) if k in rho]
    zone = np.logical_and.reduce([saturated_mask(DensityGrid.unchecked(mac.grid, rho[k], 0 * rho[k])) for k in steps])
    od = np.mean([mac.odometers[k - 1] for k in steps], axis=0)
    i, j = np.unravel_index(int(np.argmax(od)), od.shape)
    X, Y = mac.grid.centers()
    print(f"macro: saturated zone {zone.sum()} cells, pressure peak at ({X[i, j]:.2f}, {Y[i, j]:.2f})")
    print(f"peak strictly inside the saturated zone: {argmax_in_interior(od, zone, mac.grid.open_mask)}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.write_grid_csv(od, out / "pressure_mean.csv")
        io.write_pgm(od, out / "pressure_mean.pgm", vmax=float(od.max()))


if __name__ == "__main__":
    main()
