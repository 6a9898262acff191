"""Command line interface: ``hardcrowd {run,compare,rasterize,metrics,distance-field}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .analysis import evacuation_metrics
from .config import ConfigError, load_scenario
from .geometry import build_grid, compute_distance_field, distance_field_to_csv
from .runner import RunError, build_room, compare_runs, run_densities, run_scenario


def _scenario(args):
    s = load_scenario(args.scenario)
    if getattr(args, "seed", None) is not None:
        s.seed = args.seed
    if getattr(args, "frame_stride", None) is not None:
        s.output.frame_stride = args.frame_stride
    if getattr(args, "steps", None) is not None:
        s.steps = args.steps
    return s


def cmd_run(args) -> int:
    s = _scenario(args)
    out = Path(args.out or f"runs/{s.name}")
    summary = run_scenario(s, out)
    print(json.dumps(summary, indent=1))
    return 0


def cmd_compare(args) -> int:
    rep = compare_runs(args.run_a, args.run_b, args.out, threshold=args.threshold)
    rep.pop("rows")
    print(json.dumps(rep, indent=1))
    return 0


def cmd_rasterize(args) -> int:
    run = Path(args.run)
    s = load_scenario(run / "manifest.yaml" if (run / "manifest.yaml").exists() else run.parent / "manifest.yaml")
    grid = build_grid(build_room(s), args.resolution or s.resolution)
    ref = args.rho_ref if args.rho_ref is not None else "max"
    dens = run_densities(run, s, grid, ref)
    out = Path(args.out or run / "rasterized")
    out.mkdir(parents=True, exist_ok=True)
    for st, r in sorted(dens.items()):
        io.write_grid_csv(r, out / f"density_{st:06d}.csv")
        io.write_pgm(r, out / f"density_{st:06d}.pgm")
    print(f"wrote {len(dens)} frames to {out}")
    return 0


def cmd_metrics(args) -> int:
    run = Path(args.run)
    m = io.read_metrics(run / "metrics.csv")
    if "remaining" in m:
        curve = evacuation_metrics(m["time"], m["remaining"], m["exited"], window=args.window, speeds=m["mean_speed"])
        kind = "micro"
    else:
        curve = evacuation_metrics(m["time"], m["interior_mass"], m["absorbed_mass"], window=args.window)
        kind = "macro"
    rep = {
        "kind": kind,
        "frames": int(len(curve.times)),
        "final_time": float(curve.times[-1]),
        "remaining": float(curve.remaining[-1]),
        "exited": float(curve.exited[-1]),
        "jammed": bool(curve.jammed),
    }
    if args.out:
        with io.MetricsWriter(args.out, ["time", "remaining", "exited"]) as w:
            for t, r, e in curve.to_rows():
                w.write({"time": t, "remaining": r, "exited": e})
    print(json.dumps(rep, indent=1))
    return 0


def cmd_distance_field(args) -> int:
    s = load_scenario(args.scenario)
    grid = build_grid(build_room(s), args.resolution or s.resolution)
    D = compute_distance_field(grid)
    distance_field_to_csv(D, args.out)
    finite = D.values[np.isfinite(D.values)]
    print(json.dumps({"shape": list(grid.shape), "max_distance": float(finite.max(initial=0.0)), "disconnected_cells": int(D.disconnected.sum())}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hardcrowd", description="Hard-congestion crowd motion, microscopic and macroscopic.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file")
    r.add_argument("scenario")
    r.add_argument("-o", "--out", help="output directory (default runs/<name>)")
    r.add_argument("--seed", type=int)
    r.add_argument("--frame-stride", type=int)
    r.add_argument("--steps", type=int)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare two run directories")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.add_argument("-o", "--out")
    c.add_argument("--threshold", type=float, default=0.1, help="relative L1 level that defines divergence")
    c.set_defaults(func=cmd_compare)

    z = sub.add_parser("rasterize", help="rasterize the frames of a micro run")
    z.add_argument("run")
    z.add_argument("-o", "--out")
    z.add_argument("--resolution", type=float)
    z.add_argument("--rho-ref", type=float)
    z.set_defaults(func=cmd_rasterize)

    m = sub.add_parser("metrics", help="evacuation curve and jam verdict of a run")
    m.add_argument("run")
    m.add_argument("-o", "--out", help="write the evacuation curve as CSV")
    m.add_argument("--window", type=int, default=200)
    m.set_defaults(func=cmd_metrics)

    d = sub.add_parser("distance-field", help="write the exit distance field of a scenario as CSV")
    d.add_argument("scenario")
    d.add_argument("-o", "--out", required=True)
    d.add_argument("--resolution", type=float)
    d.set_defaults(func=cmd_distance_field)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RunError as exc:
        print(f"run failed at {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
