"""Acceptance criteria, one test each, at the stated tolerances.

Every test records a line ``CRITERION k: PASS|FAIL detail`` which is printed
immediately and again in the terminal summary. Run directly with
``python tests/test_acceptance.py`` or through pytest.
"""
import copy
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
import oracles
from hardcrowd.analysis import (
    LATTICE_DENSITIES,
    LatticeSpec,
    annulus_mask,
    argmax_in_interior,
    bulk_density,
    generate_lattice,
    jammed_by_normals,
    normalize_density,
    window_density,
)
from hardcrowd.config import load_scenario
from hardcrowd.geometry import Room, build_grid
from hardcrowd.io import read_metrics
from hardcrowd.macro import DensityGrid, MacroState, ProjectionParams, saturated_mask, step_macro, stochastic_project
from hardcrowd.micro import (
    Configuration,
    MicroState,
    active_constraints,
    close_pairs,
    gap_and_gradient,
    kkt_certificate,
    min_gap,
    project_step_uzawa,
    prox_regularity_bound,
    step_micro,
    wall_gap_and_gradient,
)
from hardcrowd.runner import run_macro, run_micro, run_scenario

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def record(k: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --- shared runs -------------------------------------------------------------


@pytest.fixture(scope="module")
def door_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("door")
    s = load_scenario(CONFIGS / "door.yaml")
    summary = run_scenario(s, out)
    return s, out, summary


@pytest.fixture(scope="module")
def jam_runs():
    s = load_scenario(CONFIGS / "jam.yaml")
    micro = run_micro(s)
    ms = copy.deepcopy(s)
    ms.model = "macro"
    return s, micro, run_macro(ms)


@pytest.fixture(scope="module")
def clog_runs():
    s = load_scenario(CONFIGS / "clog.yaml")
    micro = run_micro(s)
    ms = copy.deepcopy(s)
    ms.output.frame_stride = 1
    return s, micro, run_macro(ms, keep_odometers=True)


# --- criteria ----------------------------------------------------------------


def test_criterion_01_two_disk_oracle():
    q = Configuration([[0.0, 0.0], [1.0, 0.0]], 0.5)
    U = np.array([[1.0, 0.0], [0.0, 0.0]])
    step_micro(MicroState(q), 0.01, U)  # compile outside the timing
    t0 = time.perf_counter()
    st, _ = step_micro(MicroState(q), 0.01, U)
    dt = time.perf_counter() - t0
    v = (st.config.positions - q.positions) / 0.01
    err = float(np.abs(v - [[0.5, 0.0], [0.5, 0.0]]).max())
    record(1, err <= 1e-8 and dt < 1.0, f"max velocity error {err:.2e}, {dt * 1e3:.1f} ms")


def test_criterion_02_non_overlap_corridor():
    s = load_scenario(CONFIGS / "corridor.yaml")
    n = s.micro.population.count
    run = run_micro(s)
    steps = int(run.metrics["step"][-1])
    r = s.micro.radius
    ok = n == 100 and steps == 2000 and run.min_gap >= -1e-9 * r and run.kkt_ok
    record(2, ok, f"N={n}, {steps} steps, min gap {run.min_gap / r:.3e} r, certificate at every step: {run.kkt_ok}")


def test_criterion_03_prox_regularity():
    r = 0.37
    e2 = abs(prox_regularity_bound(2, r) - r * math.sqrt(2))
    scaled = [prox_regularity_bound(N, r) * N**1.5 / r for N in np.unique(np.logspace(1, 4, 40).astype(int))]
    ok = e2 <= 1e-12 and 1 <= min(scaled) and max(scaled) <= 10
    record(3, ok, f"|eta(2,r) - r sqrt2| = {e2:.1e}, eta N^1.5 / r in [{min(scaled):.3f}, {max(scaled):.3f}]")


def test_criterion_04_lattice_densities():
    got = {}
    for kind, ref in LATTICE_DENSITIES.items():
        q = generate_lattice(LatticeSpec(kind, 2500, 0.5))
        assert len(q.positions) >= 2500
        got[kind] = bulk_density(q, 0.618)
    err = {k: abs(got[k] - LATTICE_DENSITIES[k]) for k in got}
    detail = ", ".join(f"{k} {got[k]:.4f} (ref {LATTICE_DENSITIES[k]:.4f})" for k in got)
    record(4, max(err.values()) <= 0.02, detail)


def test_criterion_05_upstream_density(door_run):
    s, out, _ = door_run
    n = s.micro.population.count
    frames = {int(f["step"]): sum(1 for e in f["exited"] if not e) for f in map(json.loads, open(out / "micro/frames.jsonl"))}
    grid = build_grid(Room(s.room.outer, s.room.obstacles, s.room.exits), s.resolution)
    (a, b) = np.asarray(s.room.exits[0], dtype=float)
    mask = annulus_mask(grid, (a + b) / 2, 0.3, 2.0)
    dens = []
    for p in sorted((out / "micro_density").glob("density_*.csv")):
        st = int(p.stem.split("_")[-1])
        if st * s.tau >= 2.0 and frames[st] >= 0.25 * n:
            dens.append(np.loadtxt(p, delimiter=",")[::-1].T)
    val = window_density(dens, mask)
    record(5, 0.80 <= val <= 0.91, f"time-averaged normalized density {val:.4f} over {len(dens)} frames")


def test_criterion_06_projection_oracle():
    L, alpha, seeds = 401, 51, 100
    g = build_grid(Room([[0, 0], [L, 0], [L, 1], [0, 1]]), 1.0)

    def once(seed):
        rho = np.zeros((1,) + g.shape)
        rho[0, L // 2, 0] = alpha
        out, _ = stochastic_project(DensityGrid.unchecked(g, rho, np.zeros_like(rho)), ProjectionParams(seed=seed))
        return out.rho[0, :, 0]

    once(0)  # compile outside the timing
    t0 = time.perf_counter()
    avg = np.mean([once(s) for s in range(seeds)], axis=0)
    dt = time.perf_counter() - t0
    target = np.zeros(L)
    target[L // 2 - alpha // 2 : L // 2 + alpha // 2 + 1] = 1.0
    l1 = float(np.abs(avg - target).sum())
    record(6, l1 < 0.1 * alpha and dt < 10, f"L1 {l1:.3f} < {0.1 * alpha:.1f} over {seeds} seeds, {dt:.2f} s")


def test_criterion_07_conservation(door_run, jam_runs):
    g = build_grid(Room([[0, 0], [5, 0], [5, 5], [0, 5]]), 0.1)
    U = np.zeros(g.shape + (2,))
    U[g.open_mask] = [1.0, 0.3]
    rho = np.zeros(g.shape)
    rho[10:30, 10:30] = 0.8
    st = MacroState(DensityGrid(g, rho))
    m0 = st.density.interior_mass().sum()
    drift_closed = 0.0
    for _ in range(1000):
        st = step_macro(st, 0.05, U, ProjectionParams(seed=3))
        drift_closed = max(drift_closed, abs(st.density.interior_mass().sum() - m0) / m0)
    _, out, _ = door_run
    drifts = []
    for m in (read_metrics(out / "macro/metrics.csv"), jam_runs[2].metrics):
        tot = m["interior_mass"] + m["absorbed_mass"]
        drifts.append(float(np.abs(tot - tot[0]).max() / tot[0]))
    ok = drift_closed <= 1e-12 and max(drifts) <= 1e-12
    record(7, ok, f"closed room drift {drift_closed:.1e}, interior + absorbed drift {max(drifts):.1e}")


def test_criterion_08_feasibility(door_run, jam_runs, clog_runs):
    _, out, summary = door_run
    flags = {"door": summary["macro"]["feasible"], "jam": jam_runs[2].feasible, "clog": clog_runs[2].feasible}
    # also read back every stored frame of the door run
    stored = [np.loadtxt(p, delimiter=",") for p in (out / "macro").glob("density_*.csv")]
    lo = min(float(a.min()) for a in stored)
    hi = max(float(a.max()) for a in stored)
    ok = all(flags.values()) and lo >= 0 and hi <= 1
    record(8, ok, f"every post-correction frame in [0, 1]: {flags}; stored door frames span [{lo:.17g}, {hi:.17g}]")


def test_criterion_09_maximum_principle(door_run):
    _, out, summary = door_run
    mac = summary["macro"]
    cmp_ = summary["comparison"]
    ok = mac["strictly_decreasing"] and mac["interior_mass"] < 1e-6 and cmp_["b_exits_no_slower"]
    record(
        9,
        ok,
        f"macro interior mass strictly decreasing: {mac['strictly_decreasing']} (final {mac['interior_mass']:.2e}); "
        f"macro exited >= micro exited at every shared frame: {cmp_['b_exits_no_slower']}",
    )


def test_criterion_10_jam_dichotomy(jam_runs):
    s, micro, macro = jam_runs
    (a, b) = np.asarray(s.room.exits[0], dtype=float)
    width = float(np.linalg.norm(b - a)) / (2 * s.micro.radius)
    jam_step = int(micro.metrics["step"][-1])
    final = float(macro.metrics["interior_mass"][-1])
    ok = width < 3 and micro.jammed and jam_step <= 5000 and final < 1e-6
    record(
        10,
        ok,
        f"door {width:.2f} diameters: micro jammed at step {jam_step} with {int(micro.metrics['remaining'][-1])} left; "
        f"macro interior mass {final:.1e} after {int(macro.metrics['step'][-1])} steps",
    )


def test_criterion_11_pressure(clog_runs):
    s, micro, macro = clog_runs
    grid = macro.grid
    by_step = {st: rho for st, _, rho, _ in macro.frames}
    window = range(20, 201)
    zone = np.logical_and.reduce([saturated_mask(DensityGrid.unchecked(grid, by_step[k], np.zeros_like(by_step[k]))) for k in window])
    od = np.mean([macro.odometers[k - 1] for k in window], axis=0)
    inside = argmax_in_interior(od, zone, grid.open_mask)
    i, j = np.unravel_index(int(np.argmax(od)), od.shape)
    ok = inside and micro.min_pressure >= 0
    record(11, ok, f"odometer argmax cell ({i}, {j}) strictly inside the saturated zone: {inside}; min micro pressure {micro.min_pressure:.3g}")


def test_criterion_12_normalization():
    v = float(normalize_density(np.array([0.53]), 0.81)[0])
    record(12, abs(v - 0.65) <= 0.01, f"0.53 / 0.81 -> {v:.4f}")


def test_criterion_13_property_suites():
    rng = np.random.default_rng(2024)
    fails = {}

    # finite-difference gradients
    bad = 0
    for _ in range(200):
        n, r = 4, rng.uniform(0.1, 0.5)
        q = Configuration(rng.uniform(-2, 2, (n, 2)), r)
        x = q.positions.ravel()
        for i in range(n):
            for j in range(i + 1, n):
                fd = oracles.fd_gradient(lambda y: oracles.gap_pair(y, i, j, r), x)
                bad += np.abs(gap_and_gradient(q, i, j).gradient(n) - fd).max() > 1e-5 * max(1.0, np.abs(fd).max())
        seg = np.array([[-3.0, -1.0], [3.0, 2.0]])
        d, p = seg[1] - seg[0], q.positions[0] - seg[0]
        if abs(d[0] * p[1] - d[1] * p[0]) / np.linalg.norm(d) > 1e-2:
            fd = oracles.fd_gradient(lambda y: oracles.gap_wall(y, 0, seg, r), x)
            bad += np.abs(wall_gap_and_gradient(q, 0, seg).gradient(n) - fd).max() > 1e-5
    fails["gradients"] = bad

    # neighbor search
    bad = 0
    for _ in range(100):
        pts = rng.uniform(0, 10, (rng.integers(0, 120), 2))
        cut = rng.uniform(0.05, 3)
        a, b = close_pairs(pts, cut)
        bad += set(zip(a.tolist(), b.tolist())) != oracles.brute_pairs(pts, cut)
    fails["neighbors"] = bad

    # Uzawa against the enumerated QP
    bad = checked = 0
    while checked < 150:
        n = int(rng.integers(2, 4))
        pts = [np.zeros(2)]
        for _ in range(n - 1):
            ang = rng.uniform(0, 2 * np.pi)
            pts.append(pts[rng.integers(len(pts))] + rng.uniform(1.0 + 1e-5, 1.4) * np.array([np.cos(ang), np.sin(ang)]))
        q = Configuration(np.array(pts), 0.5)
        walls = np.array([[[-5.0, -1.0], [5.0, -1.0 + rng.uniform(-0.3, 0.3)]]]) if rng.random() < 0.5 else None
        if min_gap(q, walls) <= 1e-6:
            continue
        U = rng.uniform(-2, 2, (n, 2))
        act = active_constraints(q, 0.5 * np.abs(U).max() + 1e-3, walls)
        if not 1 <= len(act) <= 4:
            continue
        checked += 1
        q_pred = q.positions + 0.25 * U
        G = np.array([c.gradient(n) for c in act.constraints()])
        c0 = act.gap + G @ (q_pred - q.positions).ravel()
        x_ref, _ = oracles.enumerated_projection(G, c0, q_pred.ravel())
        sol = project_step_uzawa(q, q_pred, act, tol=1e-12, fallback_after=0, max_iter=10**6)
        bad += np.abs(sol.positions.ravel() - x_ref).max() > 1e-8 or not kkt_certificate(sol, 1e-10)
    fails["uzawa_vs_qp"] = bad

    # jamming detector against a 1 degree direction grid
    bad = checked = 0
    while checked < 2000:
        normals = rng.normal(size=(int(rng.integers(0, 7)), 2))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True) if len(normals) else 1
        if len(normals) and abs(oracles.max_angular_gap(normals) - math.pi) <= math.radians(2):
            continue
        checked += 1
        bad += jammed_by_normals(normals) != (oracles.free_direction_on_grid(normals, 1.0) is None)
    fails["jamming"] = bad

    record(13, not any(fails.values()), "failures per suite " + ", ".join(f"{k}={int(v)}" for k, v in fails.items()))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s", "-p", "no:cacheprovider", *sys.argv[1:]]))
