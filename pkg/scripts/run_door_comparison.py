"""Door evacuation in both models: evacuation curves, upstream density and the macro/micro comparison."""
import argparse
import json
from pathlib import Path

import numpy as np

from hardcrowd import io
from hardcrowd.analysis import annulus_mask, window_density
from hardcrowd.config import load_scenario
from hardcrowd.geometry import build_grid
from hardcrowd.runner import build_room, run_scenario

ROOT = Path(__file__).resolve().parents[1]


def upstream_density(s, out: Path, r_in=0.3, r_out=2.0, t_min=2.0, keep=0.25) -> tuple[float, int]:
    """Mean normalized micro density in an annulus in front of the first exit.

    Frames count once the crowd has settled against the door (t >= t_min) and
    while at least ``keep`` of the disks are still inside.
    """
    n = s.micro.population.count
    remaining = {f["step"]: len(f["exited"]) - sum(f["exited"]) for f in io.read_jsonl(out / "micro/frames.jsonl")}
    grid = build_grid(build_room(s), s.resolution)
    a, b = np.asarray(s.room.exits[0], dtype=float)
    mask = annulus_mask(grid, (a + b) / 2, r_in, r_out)
    frames = []
    for p in sorted((out / "micro_density").glob("density_*.csv")):
        st = int(p.stem.split("_")[-1])
        if st * s.tau >= t_min and remaining[st] >= keep * n:
            frames.append(io.read_grid_csv(p))
    return window_density(frames, mask), len(frames)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=ROOT / "configs/door.yaml")
    ap.add_argument("--out", default="runs/door")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    s = load_scenario(args.config)
    if s.model != "both":
        raise SystemExit("the comparison needs a scenario with model: both")
    if args.seed is not None:
        s.seed = args.seed
    out = Path(args.out)
    summary = run_scenario(s, out)
    dens, nf = upstream_density(s, out)
    summary["upstream_density"] = {"value": dens, "frames": nf}
    print(json.dumps(summary, indent=1))
    print(f"outputs in {out}; curves in {out / 'comparison'}")


if __name__ == "__main__":
    main()
