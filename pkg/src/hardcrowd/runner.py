"""Run orchestration for scenarios: micro, macro, both, and run comparison."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .analysis import LatticeSpec, evacuation_metrics, generate_lattice, jamming_report, normalize_density, rasterize_micro
from .behavior import BehaviorParams, assign_desired
from .config import Scenario, dump_scenario, load_scenario, seeds
from .geometry import (
    Grid,
    Room,
    VelocityField,
    build_grid,
    compute_distance_field,
    desired_velocity_from_distance,
    point_segment_distance,
)
from .macro import (
    DensityGrid,
    MacroState,
    ProjectionParams,
    density_dependent_velocity,
    linear_alpha,
    step_macro,
)
from .micro import Configuration, MicroParams, MicroState, kkt_certificate, min_gap, step_micro

log = logging.getLogger(__name__)


class RunError(RuntimeError):
    """A solver failure during a run, tagged with the step index."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


def build_room(s: Scenario) -> Room:
    return Room(s.room.outer, s.room.obstacles, s.room.exits)


def build_fields(s: Scenario, grid: Grid) -> dict[str, VelocityField]:
    out = {}
    dist = None
    for name, f in s.fields.items():
        if f.kind == "exit":
            if dist is None:
                dist = compute_distance_field(grid)
            out[name] = desired_velocity_from_distance(dist, f.speed)
        else:
            v = np.zeros(grid.shape + (2,))
            v[grid.open_mask] = np.asarray(f.velocity, dtype=float) * f.speed
            out[name] = VelocityField(grid, v)
    return out


# --- micro ---------------------------------------------------------------


def random_fill(room: Room, region, count: int, r: float, rng: np.random.Generator, margin: float = 0.0, max_tries: int = 200000):
    """Random sequential addition of non-overlapping disks inside ``region`` and at least r from every wall."""
    x0, y0, x1, y1 = map(float, region)
    walls = room.wall_segments()
    exits = room.exit_segments()
    segs = np.concatenate([walls, exits]) if len(exits) else walls
    pts = np.zeros((0, 2))
    cell = 2 * r + margin
    buckets: dict[tuple[int, int], list[int]] = {}
    tries = 0
    while len(pts) < count:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"could only place {len(pts)} of {count} disks in region {region}")
        p = np.array([rng.uniform(x0 + r, x1 - r), rng.uniform(y0 + r, y1 - r)])
        if not room.contains(p[None])[0]:
            continue
        d, _ = point_segment_distance(p[None], segs)
        if d.min() < r + margin:
            continue
        kx, ky = int(math.floor(p[0] / cell)), int(math.floor(p[1] / cell))
        ok = True
        for ox in (-1, 0, 1):
            for oy in (-1, 0, 1):
                for k in buckets.get((kx + ox, ky + oy), ()):
                    if np.hypot(*(pts[k] - p)) < 2 * r + margin:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            buckets.setdefault((kx, ky), []).append(len(pts))
            pts = np.vstack([pts, p])
    return pts


def initial_configuration(s: Scenario, room: Room) -> tuple[Configuration, np.ndarray]:
    m = s.micro
    p = m.population
    r = m.radius
    if p.kind == "positions":
        pos = np.asarray(p.positions, dtype=float).reshape(-1, 2)
    elif p.kind == "lattice":
        x0, y0, x1, y1 = map(float, p.region)
        big = generate_lattice(LatticeSpec(p.lattice, max(1, 4 * p.count), r, (x0 + r, y0 + r)))
        inside = (big.positions[:, 0] <= x1 - r) & (big.positions[:, 1] <= y1 - r)
        pos = big.positions[inside][: p.count]
        if len(pos) < p.count:
            raise ValueError(f"micro.population: region {p.region} holds only {len(pos)} lattice sites")
    else:
        rng = np.random.default_rng(seeds(s.seed)["population"])
        pos = random_fill(room, p.region, p.count, r, rng, p.margin)
    n = len(pos)
    types = np.array(p.types if p.types else ["default"] * n, dtype=object)
    if len(types) != n:
        raise ValueError(f"micro.population.types: {len(types)} entries for {n} disks")
    for tr in p.type_regions:
        bx0, by0, bx1, by1 = tr["box"]
        sel = (pos[:, 0] >= bx0) & (pos[:, 0] <= bx1) & (pos[:, 1] >= by0) & (pos[:, 1] <= by1)
        types[sel] = tr["type"]
    cfg = Configuration(pos, r)
    walls = room.wall_segments()
    g = min_gap(cfg, walls)
    if g < -(1e-9 * r if m.solver.tol_geom is None else m.solver.tol_geom):
        raise ValueError(f"micro.population: initial configuration overlaps (min gap {g:.3e})")
    return cfg, types


@dataclass
class MicroRun:
    frames: list = field(default_factory=list)  # (step, time, positions, exited)
    metrics: dict = field(default_factory=dict)
    jammed: bool = False
    kkt_ok: bool = True
    min_gap: float = math.inf
    min_pressure: float = math.inf
    final: MicroState | None = None
    grid: Grid | None = None
    types: np.ndarray | None = None


def run_micro(s: Scenario, outdir: Path | None = None) -> MicroRun:
    room = build_room(s)
    grid = build_grid(room, s.resolution)
    fields = build_fields(s, grid)
    walls = room.wall_segments()
    exits = room.exit_segments()
    cfg, types = initial_configuration(s, room)
    m = s.micro
    bparams = {
        t: BehaviorParams(l_prox=ts.l_prox, alpha=math.radians(ts.alpha_deg), strategy=ts.strategy, field=ts.field)
        for t, ts in m.types.items()
    }
    sp = m.solver
    params = MicroParams(tol_geom=sp.tol_geom, tol_kkt=sp.tol_kkt, max_iter=sp.max_iter, eps_act=sp.eps_act, accelerate=sp.accelerate)
    tol_kkt = 1e-9 * m.radius if sp.tol_kkt is None else sp.tol_kkt
    state = MicroState(cfg)
    n = len(cfg)
    cols = ["step", "time", "remaining", "exited", "min_gap", "kkt_residual", "iterations", "mean_speed", "max_pressure"]
    hist = {c: [] for c in cols}
    run = MicroRun(grid=grid, types=types)
    writer = None
    records = []
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
        writer = io.MetricsWriter(outdir / "metrics.csv", cols)
    stride = s.output.frame_stride

    def record(st: MicroState, press):
        run.frames.append((st.step, st.time, st.config.positions.copy(), st.config.exited.copy()))
        if outdir is not None and s.output.frames:
            records.append(io.frame_record(st.step, st.time, st.config.positions, st.config.exited, press))

    def log_row(row):
        for c in cols:
            hist[c].append(row[c])
        if writer is not None:
            writer.write(row)

    gap0 = min_gap(state.config, walls)
    log_row(
        dict(step=0, time=0.0, remaining=n, exited=0, min_gap=float(min(gap0, 2 * m.radius)), kkt_residual=0.0,
             iterations=0, mean_speed=0.0, max_pressure=0.0)
    )
    record(state, [])
    speeds = None
    try:
        for k in range(1, s.steps + 1):
            desired = assign_desired(state.config, fields, bparams, types, speeds)
            try:
                state, rep = step_micro(state, s.tau, desired, walls, exits, params)
            except Exception as exc:  # solver failures are reported with their step
                raise RunError(k, exc) from exc
            speeds = state.speeds
            sol = rep.solution
            lam = sol.multipliers
            if len(lam):
                run.kkt_ok &= kkt_certificate(sol, tol_kkt)
                run.min_pressure = min(run.min_pressure, float(lam.min() / s.tau))
            gap = min_gap(state.config, walls)
            run.min_gap = min(run.min_gap, gap)
            active = ~state.config.exited
            press = [
                (i, j if j >= 0 else -(w + 1), l / s.tau)
                for i, j, w, l in zip(sol.active.i.tolist(), sol.active.j.tolist(), sol.active.wall.tolist(), lam.tolist())
                if l > 0
            ]
            log_row(
                dict(
                    step=k,
                    time=float(state.time),
                    remaining=int(active.sum()),
                    exited=int(n - active.sum()),
                    min_gap=float(min(gap, 2 * m.radius)),
                    kkt_residual=float(sol.kkt_residual),
                    iterations=int(sol.iterations),
                    mean_speed=float(speeds[active].mean()) if active.any() else 0.0,
                    max_pressure=float(lam.max() / s.tau) if len(lam) else 0.0,
                )
            )
            if k % stride == 0:
                record(state, press)
            if not active.any():
                break
            if m.stop_on_jam and k > m.jam_window:
                w = m.jam_window + 1
                verdict = evacuation_metrics(
                    hist["time"][-w:], hist["remaining"][-w:], window=m.jam_window,
                    speeds=hist["mean_speed"][-w:], speed_tol=m.jam_speed_tol,
                )
                if verdict.jammed:
                    run.jammed = True
                    if k % stride:
                        record(state, press)
                    break
    finally:
        if writer is not None:
            writer.close()
        if outdir is not None and s.output.frames:
            io.write_jsonl(records, outdir / "frames.jsonl")
    run.metrics = {c: np.asarray(v, dtype=float) for c, v in hist.items()}
    run.final = state
    curve = evacuation_metrics(run.metrics["time"], run.metrics["remaining"], run.metrics["exited"],
                               window=m.jam_window, speeds=run.metrics["mean_speed"], speed_tol=m.jam_speed_tol)
    run.jammed = run.jammed or curve.jammed
    if outdir is not None:
        rep = jamming_report(state.config, walls=walls).to_dict()
        rep["verdict_jammed"] = bool(run.jammed)
        (outdir / "jamming.json").write_text(json.dumps(rep, indent=1))
    return run


# --- macro ---------------------------------------------------------------


def _rect_density(s: Scenario, grid: Grid) -> np.ndarray:
    M = s.macro
    rho = np.zeros((M.populations,) + grid.shape)
    X, Y = grid.centers()
    for r in M.rectangles:
        x0, y0, x1, y1 = r.box
        sel = (X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1) & grid.open_mask
        rho[r.population][sel] = r.density
    if np.any(rho.sum(axis=0) > 1):
        raise ValueError("macro.rectangles: overlapping rectangles exceed density 1")
    return rho


def _raster_density(s: Scenario, grid: Grid) -> np.ndarray:
    out = []
    for k, path in enumerate(s.macro.raster):
        p = Path(path)
        if not p.is_absolute():
            p = Path(s.base_dir) / p
        vals = io.read_grid_csv(p)
        if vals.shape != grid.shape:
            raise ValueError(f"macro.raster[{k}]: shape {vals.shape} does not match grid {grid.shape}")
        if np.any(vals < 0) or np.any(vals > 1):
            raise ValueError(f"macro.raster[{k}]: densities must lie in [0, 1]")
        out.append(np.where(grid.open_mask, vals, 0.0))
    rho = np.array(out)
    if np.any(rho.sum(axis=0) > 1):
        raise ValueError("macro.raster: populations sum above 1")
    return rho


@dataclass
class MacroRun:
    frames: list = field(default_factory=list)  # (step, time, rho, odometer)
    metrics: dict = field(default_factory=dict)
    grid: Grid | None = None
    final: MacroState | None = None
    feasible: bool = True
    strictly_decreasing: bool = True
    odometers: list = field(default_factory=list)


def run_macro(s: Scenario, outdir: Path | None = None, initial: np.ndarray | None = None, keep_odometers: bool = False) -> MacroRun:
    room = build_room(s)
    grid = build_grid(room, s.resolution)
    fields = build_fields(s, grid)
    M = s.macro
    if initial is not None:
        rho0 = np.asarray(initial, dtype=float).reshape((M.populations,) + grid.shape)
    elif M.initial == "raster":
        rho0 = _raster_density(s, grid)
    else:
        rho0 = _rect_density(s, grid)
    state = MacroState(DensityGrid(grid, rho0))
    pparams = ProjectionParams(seed=seeds(s.seed)["projection"], quantum=M.quantum, max_walk_steps=M.max_walk_steps)
    Us = [fields[f] for f in M.fields]
    cols = ["step", "time", "interior_mass", "absorbed_mass", "total_mass", "max_density", "odometer_total", "odometer_max"]
    cols += [f"mass_{p}" for p in range(M.populations)]
    run = MacroRun(grid=grid)
    hist = {c: [] for c in cols}
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
    writer = io.MetricsWriter(outdir / "metrics.csv", cols) if outdir is not None else None
    stride = s.output.frame_stride
    m0 = float(state.density.interior_mass().sum())

    def emit(st: MacroState):
        od = st.odometer if st.odometer is not None else np.zeros(grid.shape)
        run.frames.append((st.step, st.time, st.density.rho.copy(), od.copy()))
        if outdir is not None and s.output.frames:
            tot = st.density.total
            io.write_grid_csv(tot, outdir / f"density_{st.step:06d}.csv")
            io.write_pgm(tot, outdir / f"density_{st.step:06d}.pgm")
            if M.populations > 1:
                for p in range(M.populations):
                    io.write_grid_csv(st.density.rho[p], outdir / f"density_p{p}_{st.step:06d}.csv")
            io.write_grid_csv(od, outdir / f"pressure_{st.step:06d}.csv")
            io.write_pgm(od, outdir / f"pressure_{st.step:06d}.pgm", vmax=float(od.max()))

    def log_row(st: MacroState):
        d = st.density
        per = d.interior_mass()
        od = st.odometer if st.odometer is not None else np.zeros(grid.shape)
        row = dict(
            step=st.step,
            time=float(st.time),
            interior_mass=float(per.sum()),
            absorbed_mass=float(d.absorbed_mass().sum()),
            total_mass=float(per.sum() + d.absorbed_mass().sum()),
            max_density=float(d.total.max(initial=0.0)),
            odometer_total=float(od.sum()),
            odometer_max=float(od.max(initial=0.0)),
        )
        for p in range(M.populations):
            row[f"mass_{p}"] = float(per[p])
        for c in cols:
            hist[c].append(row[c])
        if writer is not None:
            writer.write(row)

    log_row(state)
    emit(state)
    try:
        for k in range(1, s.steps + 1):
            if M.alpha == "linear":
                U = np.stack([density_dependent_velocity(state.density, u, linear_alpha).values for u in Us])
            else:
                U = np.stack([u.values for u in Us])
            U = U[0] if M.populations == 1 else U
            prev = float(state.density.interior_mass().sum())
            try:
                state = step_macro(state, s.tau, U, pparams)
            except Exception as exc:
                raise RunError(k, exc) from exc
            d = state.density
            run.feasible &= bool(np.all(d.rho >= 0) and np.all(d.total <= 1.0))
            cur = float(d.interior_mass().sum())
            if prev >= 1e-6 and not cur < prev:
                run.strictly_decreasing = False
            if keep_odometers:
                run.odometers.append(state.odometer.copy())
            log_row(state)
            if k % stride == 0:
                emit(state)
            if m0 > 0 and cur <= M.stop_below * m0:
                if k % stride:
                    emit(state)
                break
    finally:
        if writer is not None:
            writer.close()
    run.metrics = {c: np.asarray(v, dtype=float) for c, v in hist.items()}
    run.final = state
    return run


# --- pipelines -----------------------------------------------------------


def micro_density_frames(mrun: MicroRun, grid: Grid, rho_ref="max") -> tuple[list, float]:
    """Rasterized (normalized) micro densities for every stored frame, and the reference density used."""
    r = mrun.final.config.radius
    raw = [(st, t, rasterize_micro(Configuration(p, r, e), grid).rho[0]) for st, t, p, e in mrun.frames]
    ref = max(float(r.max(initial=0.0)) for _, _, r in raw) if rho_ref == "max" else float(rho_ref)
    if not ref > 0:
        ref = 1.0
    return [(st, t, normalize_density(r, ref)) for st, t, r in raw], ref


def run_scenario(s: Scenario, outdir: str | Path | None) -> dict:
    """Run a scenario and write its outputs; returns a summary dict."""
    out = Path(outdir) if outdir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_scenario(s, out / "manifest.yaml")
    summary: dict = {"name": s.name, "model": s.model, "seeds": seeds(s.seed)}
    mrun = None
    if s.model in ("micro", "both"):
        mdir = (out / "micro") if (out is not None and s.model == "both") else out
        mrun = run_micro(s, mdir)
        summary["micro"] = {
            "steps": int(mrun.metrics["step"][-1]),
            "exited": int(mrun.metrics["exited"][-1]),
            "jammed": bool(mrun.jammed),
            "min_gap": float(mrun.min_gap),
            "kkt_ok": bool(mrun.kkt_ok),
        }
    if s.model in ("macro", "both"):
        mac_dir = (out / "macro") if (out is not None and s.model == "both") else out
        initial = None
        if s.model == "both":
            frames, ref = micro_density_frames(mrun, mrun.grid, s.macro.rho_ref)
            summary["rho_ref"] = ref
            if s.macro.initial == "from_micro":
                initial = frames[0][2][None]
            if out is not None:
                rdir = out / "micro_density"
                rdir.mkdir(exist_ok=True)
                for st, _, r in frames:
                    io.write_grid_csv(r, rdir / f"density_{st:06d}.csv")
                    io.write_pgm(r, rdir / f"density_{st:06d}.pgm")
        run = run_macro(s, mac_dir, initial)
        summary["macro"] = {
            "steps": int(run.metrics["step"][-1]),
            "interior_mass": float(run.metrics["interior_mass"][-1]),
            "absorbed_mass": float(run.metrics["absorbed_mass"][-1]),
            "feasible": bool(run.feasible),
            "strictly_decreasing": bool(run.strictly_decreasing),
        }
        if s.model == "both" and out is not None:
            rep = compare_runs(out / "micro", out / "macro", out / "comparison")
            rep.pop("rows")
            summary["comparison"] = rep
    if out is not None:
        (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


# --- comparison ----------------------------------------------------------


def _load_run(path: Path):
    s = load_scenario(path / "manifest.yaml") if (path / "manifest.yaml").exists() else load_scenario(path.parent / "manifest.yaml")
    metrics = io.read_metrics(path / "metrics.csv")
    return s, metrics


def _run_kind(path: Path) -> str:
    if (path / "frames.jsonl").exists():
        return "micro"
    return "macro"


def run_densities(path: Path, s: Scenario, grid: Grid, rho_ref="max") -> dict[int, np.ndarray]:
    """Per-frame densities of a run directory keyed by step (micro frames rasterized and normalized)."""
    if _run_kind(path) == "micro":
        frames = io.read_jsonl(path / "frames.jsonl")
        raw = {}
        for f in frames:
            cfg = Configuration(np.asarray(f["positions"], dtype=float).reshape(-1, 2), s.micro.radius, np.asarray(f["exited"], dtype=bool))
            raw[int(f["step"])] = rasterize_micro(cfg, grid).rho[0]
        ref = max((float(r.max(initial=0.0)) for r in raw.values()), default=1.0) if rho_ref == "max" else float(rho_ref)
        ref = ref if ref > 0 else 1.0
        return {k: normalize_density(v, ref) for k, v in raw.items()}
    out = {}
    for p in sorted(path.glob("density_[0-9]*.csv")):
        out[int(p.stem.split("_")[-1])] = io.read_grid_csv(p)
    return out


def exited_fraction(path: Path, metrics: dict) -> dict[int, float]:
    steps = metrics["step"].astype(int)
    if _run_kind(path) == "micro":
        n = metrics["remaining"][0] + metrics["exited"][0]
        frac = metrics["exited"] / n if n > 0 else np.zeros_like(metrics["exited"])
    else:
        tot = metrics["total_mass"][0]
        frac = metrics["absorbed_mass"] / tot if tot > 0 else np.zeros_like(metrics["absorbed_mass"])
    return dict(zip(steps.tolist(), frac.tolist()))


def compare_runs(path_a, path_b, outdir=None, threshold: float = 0.1) -> dict:
    """Per-frame L1 distance between two runs' densities and their exited-fraction curves.

    ``divergence_time`` is the first shared frame where the L1 distance
    exceeds ``threshold`` times the larger initial mass, or None.
    """
    path_a, path_b = Path(path_a), Path(path_b)
    sa, ma = _load_run(path_a)
    sb, mb = _load_run(path_b)
    ga = build_grid(build_room(sa), sa.resolution)
    gb = build_grid(build_room(sb), sb.resolution)
    if not ga.same_geometry(gb):
        raise ValueError("runs do not share the same grid geometry")
    if not math.isclose(sa.tau, sb.tau, rel_tol=1e-12):
        raise ValueError(f"runs use different time steps ({sa.tau} vs {sb.tau})")
    da = run_densities(path_a, sa, ga, sa.macro.rho_ref)
    db = run_densities(path_b, sb, gb, sb.macro.rho_ref)
    ea = exited_fraction(path_a, ma)
    eb = exited_fraction(path_b, mb)
    shared = sorted(set(da) & set(db) & set(ea) & set(eb))
    area = ga.cell_area
    rows = []
    m0 = max(float(da[shared[0]].sum()), float(db[shared[0]].sum())) * area if shared else 0.0
    divergence = None
    for st in shared:
        l1 = float(np.abs(da[st] - db[st]).sum() * area)
        t = st * sa.tau
        rows.append({"step": st, "time": t, "l1": l1, "exited_a": ea[st], "exited_b": eb[st]})
        if divergence is None and m0 > 0 and l1 > threshold * m0:
            divergence = t
    report = {
        "frames": len(rows),
        "max_l1": max((r["l1"] for r in rows), default=0.0),
        "divergence_time": divergence,
        "b_exits_no_slower": all(r["exited_b"] >= r["exited_a"] for r in rows),
        "a_exits_no_slower": all(r["exited_a"] >= r["exited_b"] for r in rows),
    }
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        with io.MetricsWriter(outdir / "comparison.csv", ["step", "time", "l1", "exited_a", "exited_b"]) as w:
            for r in rows:
                w.write(r)
        (outdir / "comparison.json").write_text(json.dumps(report, indent=1))
    report["rows"] = rows
    return report
