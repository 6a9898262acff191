"""Narrow door: the micro crowd jams while the macro density empties."""
import argparse
import copy
from pathlib import Path

import numpy as np

from hardcrowd.analysis import jamming_report
from hardcrowd.config import load_scenario
from hardcrowd.runner import build_room, run_macro, run_micro

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=ROOT / "configs/jam.yaml")
    ap.add_argument("--seeds", type=int, nargs="+")
    args = ap.parse_args()
    base = load_scenario(args.config)
    a, b = np.asarray(base.room.exits[0], dtype=float)
    print(f"door width {np.linalg.norm(b - a) / (2 * base.micro.radius):.2f} diameters")
    ms = copy.deepcopy(base)
    ms.model = "macro"
    mac = run_macro(ms)
    print(f"macro: interior mass {mac.metrics['interior_mass'][-1]:.2e} after {int(mac.metrics['step'][-1])} steps")
    walls = build_room(base).wall_segments()
    for seed in args.seeds or [base.seed]:
        s = copy.deepcopy(base)
        s.seed = seed
        run = run_micro(s)
        rep = jamming_report(run.final.config, walls=walls)
        print(
            f"micro seed {seed}: jammed={run.jammed} at step {int(run.metrics['step'][-1])}, "
            f"{int(run.metrics['remaining'][-1])} left, {rep.flags.sum()} locally jammed disks"
        )


if __name__ == "__main__":
    main()
