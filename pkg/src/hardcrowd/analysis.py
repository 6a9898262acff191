"""Diagnostics linking the two models: rasterization, lattices, jamming, evacuation metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .geometry import Grid, Room, VelocityField, build_grid
from .macro import DensityGrid
from .micro import Configuration, active_constraints

RHO_TRIANGULAR = math.pi / (2 * math.sqrt(3))
RHO_CARTESIAN = math.pi / 4
RHO_LOOSE_TRIANGULAR = math.pi * math.sqrt(3) / 8
LATTICE_DENSITIES = {
    "triangular": RHO_TRIANGULAR,
    "cartesian": RHO_CARTESIAN,
    "loose-triangular": RHO_LOOSE_TRIANGULAR,
}


@numba.njit(cache=True)
def _coverage(pos, r, x0, y0, h, nsx, nsy):
    """Boolean coverage of an ``nsx x nsy`` sample lattice with spacing h (samples at sub-cell centers)."""
    cov = np.zeros((nsx, nsy), dtype=np.bool_)
    r2 = r * r
    for k in range(pos.shape[0]):
        px, py = pos[k, 0], pos[k, 1]
        i0 = max(0, int(math.floor((px - r - x0) / h - 0.5)))
        i1 = min(nsx - 1, int(math.ceil((px + r - x0) / h - 0.5)))
        j0 = max(0, int(math.floor((py - r - y0) / h - 0.5)))
        j1 = min(nsy - 1, int(math.ceil((py + r - y0) / h - 0.5)))
        for i in range(i0, i1 + 1):
            sx = x0 + (i + 0.5) * h - px
            for j in range(j0, j1 + 1):
                sy = y0 + (j + 0.5) * h - py
                if sx * sx + sy * sy <= r2:
                    cov[i, j] = True
    return cov


def rasterize_micro(q: Configuration, grid: Grid, supersample: int = 4, mask_walls: bool = True) -> DensityGrid:
    """Area fraction of each cell covered by the union of active disks, by ``supersample^2`` point sampling.

    With ``mask_walls`` the coverage of wall cells is dropped so the result is
    a valid density on the room's grid.
    """
    if supersample < 1:
        raise ValueError("supersample must be at least 1")
    if not math.isclose(grid.dx, grid.dy, rel_tol=1e-12):
        raise ValueError("rasterization needs square cells")
    s = supersample
    pos = np.ascontiguousarray(q.positions[q.active], dtype=float)
    cov = _coverage(pos, q.radius, grid.x0, grid.y0, grid.dx / s, grid.nx * s, grid.ny * s)
    frac = cov.reshape(grid.nx, s, grid.ny, s).mean(axis=(1, 3))
    if mask_walls:
        frac = np.where(grid.open_mask, frac, 0.0)
    return DensityGrid.unchecked(grid, frac[None].copy(), np.zeros((1,) + grid.shape))


def normalize_density(rho_raw: DensityGrid | np.ndarray, rho_ref: float):
    """``min(rho_raw / rho_ref, 1)`` cellwise."""
    if not rho_ref > 0:
        raise ValueError("rho_ref must be positive")
    if rho_ref > 1:
        raise ValueError("rho_ref cannot exceed the unit saturation value")
    if isinstance(rho_raw, DensityGrid):
        return DensityGrid.unchecked(rho_raw.grid, np.minimum(rho_raw.rho / rho_ref, 1.0), rho_raw.absorbed.copy())
    return np.minimum(np.asarray(rho_raw, dtype=float) / rho_ref, 1.0)


@dataclass
class LatticeSpec:
    kind: str = "triangular"
    count: int = 100
    radius: float = 0.5
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in LATTICE_DENSITIES:
            raise ValueError(f"unknown lattice kind {self.kind!r}")
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if not self.radius > 0:
            raise ValueError("radius must be positive")


def generate_lattice(spec: LatticeSpec) -> Configuration:
    """A roughly square patch of ``spec.count`` touching disks, filled row by row.

    The loose triangular lattice is the triangular one with every site at odd
    row and odd column (in lattice coordinates) removed, which leaves each
    disk with four contacts at 0, 60, 180 and 240 degrees.
    """
    r = spec.radius
    n = spec.count
    # spacing inflated by 1e-12 relative so round-off never produces an overlap
    h = r * (1 + 1e-12)
    keep_frac = 0.75 if spec.kind == "loose-triangular" else 1.0
    cols = max(1, math.ceil(math.sqrt(n / keep_frac)))
    if spec.kind == "loose-triangular":
        cols += cols % 2
    pts = []
    row = 0
    while len(pts) < n:
        for c in range(cols):
            if spec.kind == "cartesian":
                p = (2 * h * c, 2 * h * row)
            else:
                # skewed coordinates: site = c' a1 + row a2, with c' = c - floor(row / 2)
                if spec.kind == "loose-triangular":
                    cp = c - row // 2
                    if cp % 2 == 1 and row % 2 == 1:
                        continue
                p = (2 * h * c + h * (row % 2), math.sqrt(3) * h * row)
            pts.append(p)
            if len(pts) == n:
                break
        row += 1
    pos = np.asarray(pts, dtype=float) + np.asarray(spec.origin, dtype=float)
    return Configuration(pos, r)


def contact_normals(q: Configuration, i: int, eps_act: float, walls=None) -> np.ndarray:
    """Unit vectors from disk i toward each of its contacts (gap <= eps_act)."""
    act = active_constraints(q, eps_act, walls)
    normals = []
    for k in range(len(act)):
        if act.i[k] == i:
            normals.append(act.e[k])
        elif act.j[k] == i:
            normals.append(-act.e[k])
    return np.asarray(normals, dtype=float).reshape(-1, 2)


def jammed_by_normals(normals: np.ndarray, angle_tol: float = 1e-12) -> bool:
    """True when no nonzero v has ``n . v <= 0`` for every normal n (the normals positively span the plane)."""
    normals = np.asarray(normals, dtype=float).reshape(-1, 2)
    if len(normals) < 3:
        return False
    ang = np.sort(np.arctan2(normals[:, 1], normals[:, 0]))
    gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * math.pi]]))
    return bool(gaps.max() < math.pi - angle_tol)


def is_locally_jammed(q: Configuration, i: int, eps_act: float | None = None, walls=None) -> bool:
    eps_act = 1e-9 * q.radius if eps_act is None else eps_act
    return jammed_by_normals(contact_normals(q, i, eps_act, walls))


@dataclass
class JammingReport:
    flags: np.ndarray

    @property
    def fraction(self) -> float:
        return float(self.flags.mean()) if len(self.flags) else 0.0

    def to_dict(self) -> dict:
        return {"fraction": self.fraction, "jammed": np.flatnonzero(self.flags).tolist(), "count": int(len(self.flags))}


def jamming_report(q: Configuration, eps_act: float | None = None, walls=None) -> JammingReport:
    """Local-jamming flag for every active disk."""
    eps_act = 1e-9 * q.radius if eps_act is None else eps_act
    act = active_constraints(q, eps_act, walls)
    per: dict[int, list] = {}
    for k in range(len(act)):
        per.setdefault(int(act.i[k]), []).append(act.e[k])
        if act.j[k] >= 0:
            per.setdefault(int(act.j[k]), []).append(-act.e[k])
    ids = q.active
    return JammingReport(np.array([jammed_by_normals(np.array(per.get(int(i), []))) for i in ids], dtype=bool))


def divergence(u: VelocityField) -> np.ndarray:
    """Central-difference divergence on open cells (one-sided next to walls, nan on walls)."""
    grid = u.grid
    valid = grid.open_mask
    out = np.zeros(grid.shape)
    for axis, h in ((0, grid.dx), (1, grid.dy)):
        c = u.values[..., axis]
        fwd = np.zeros(grid.shape, dtype=bool)
        bwd = np.zeros(grid.shape, dtype=bool)
        cf = np.zeros(grid.shape)
        cb = np.zeros(grid.shape)
        sl_hi = [slice(None)] * 2
        sl_lo = [slice(None)] * 2
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(None, -1)
        fwd[tuple(sl_lo)] = valid[tuple(sl_hi)]
        cf[tuple(sl_lo)] = c[tuple(sl_hi)]
        bwd[tuple(sl_hi)] = valid[tuple(sl_lo)]
        cb[tuple(sl_hi)] = c[tuple(sl_lo)]
        d = np.where(fwd & bwd, (cf - cb) / (2 * h), np.where(fwd, (cf - c) / h, np.where(bwd, (c - cb) / h, 0.0)))
        out += d
    return np.where(valid, out, np.nan)


def macro_feasibility_check(u: VelocityField, rho: DensityGrid, tol: float = 1e-9) -> float:
    """Largest ``-div u`` over saturated cells (0 when u does not compress any saturated cell)."""
    sat = (rho.total >= 1.0 - tol) & rho.grid.open_mask
    if not sat.any():
        return 0.0
    div = divergence(u)
    return float(max(0.0, np.max(-div[sat])))


@dataclass
class EvacuationCurve:
    times: np.ndarray
    remaining: np.ndarray
    exited: np.ndarray
    jammed: bool = False

    def to_rows(self):
        return [(float(t), float(m), float(e)) for t, m, e in zip(self.times, self.remaining, self.exited)]


def evacuation_metrics(
    times,
    remaining,
    exited=None,
    window: int = 200,
    rel_tol: float = 1e-6,
    speeds=None,
    speed_tol: float | None = None,
) -> EvacuationCurve:
    """Evacuation curve and jam verdict.

    The run is judged jammed when the remaining mass (or disk count) is
    nonzero and changes by less than ``rel_tol`` relative over the trailing
    ``window`` steps. When a per-frame mean speed series is passed, the crowd
    must also have stopped (mean speed below ``speed_tol``) over that window,
    which separates a blocked arch from a crowd still walking to the door.
    """
    times = np.asarray(times, dtype=float)
    remaining = np.asarray(remaining, dtype=float)
    if len(times) == 0:
        raise ValueError("empty run")
    if len(remaining) != len(times):
        raise ValueError("times and remaining must have equal length")
    exited = np.zeros_like(remaining) if exited is None else np.asarray(exited, dtype=float)
    if np.any(exited < 0) or np.any(np.diff(exited) < -1e-12 * max(1.0, float(np.abs(exited).max(initial=0.0)))):
        raise ValueError("exited tally must be non-negative and non-decreasing")
    jammed = False
    if len(remaining) > window:
        tail = remaining[-(window + 1) :]
        top = tail.max()
        if top > 0 and (top - tail.min()) <= rel_tol * top:
            jammed = True
            if speeds is not None:
                s = np.asarray(speeds, dtype=float)[-(window + 1) :]
                jammed = bool(np.all(s <= (1e-3 if speed_tol is None else speed_tol)))
    return EvacuationCurve(times, remaining, exited, jammed)


def annulus_mask(grid: Grid, center, r_in: float, r_out: float) -> np.ndarray:
    """Open cells whose centers lie at distance in ``[r_in, r_out]`` from ``center``."""
    X, Y = grid.centers()
    d = np.hypot(X - center[0], Y - center[1])
    return grid.open_mask & (d >= r_in) & (d <= r_out)


def window_density(frames, mask: np.ndarray) -> float:
    """Mean density over the cells of ``mask``, averaged over the given frames."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty window")
    vals = [float(np.asarray(f)[mask].mean()) for f in frames]
    if not vals:
        raise ValueError("no frames to average")
    return float(np.mean(vals))


def zone_interior(zone: np.ndarray, open_mask: np.ndarray) -> np.ndarray:
    """Cells of ``zone`` whose open 8-neighbours all belong to ``zone`` (walls do not count as leaving it)."""
    zone = np.asarray(zone, dtype=bool)
    outside = np.pad(np.asarray(open_mask, dtype=bool) & ~zone, 1)
    nx, ny = zone.shape
    hit = np.zeros_like(zone)
    for a in (0, 1, 2):
        for b in (0, 1, 2):
            hit |= outside[a : a + nx, b : b + ny]
    return zone & ~hit


def argmax_in_interior(values: np.ndarray, zone: np.ndarray, open_mask: np.ndarray) -> bool:
    """True when the largest entry of ``values`` sits in the interior of ``zone``."""
    i, j = np.unravel_index(int(np.argmax(values)), np.shape(values))
    return bool(zone_interior(zone, open_mask)[i, j])


def bulk_density(q: Configuration, resolution: float, margin: float | None = None, supersample: int = 4) -> float:
    """Mean rasterized density over cells at least ``margin`` inside the bounding box of the disk centers.

    Use a cell size incommensurate with the lattice spacing so the sampling
    does not lock onto the lattice period.
    """
    pos = q.positions[q.active]
    if len(pos) == 0:
        raise ValueError("no active disks")
    r = q.radius
    margin = 4 * r if margin is None else margin
    lo = pos.min(axis=0) - r
    hi = pos.max(axis=0) + r
    room = Room([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    grid = build_grid(room, resolution)
    rho = rasterize_micro(q, grid, supersample).rho[0]
    X, Y = grid.centers()
    h = resolution / 2
    inner = (
        (X - h >= pos[:, 0].min() + margin)
        & (X + h <= pos[:, 0].max() - margin)
        & (Y - h >= pos[:, 1].min() + margin)
        & (Y + h <= pos[:, 1].max() - margin)
    )
    if not inner.any():
        raise ValueError("patch too small for the requested margin")
    return float(rho[inner].mean())
