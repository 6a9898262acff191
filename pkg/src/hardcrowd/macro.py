"""Macroscopic model: density transport followed by a stochastic projection.

Densities are stored in units of the saturation value, so a cell holds at
most 1 and a cell's mass is ``rho * dx * dy``. Populations are stacked on
the first axis of a ``(P, nx, ny)`` array; the single-population model is the
case ``P = 1``.

The projection launches, from every overfull cell, random walkers carrying
the excess. A walker moves to one of the four neighbors uniformly at random,
stays put when the move hits a wall or leaves the grid, fills unsaturated
cells up to capacity and is absorbed on exit cells. The mass a cell passes
on to a neighbor is added to its odometer, which serves as the pressure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .geometry import EXIT, INTERIOR, Grid, VelocityField

# walk outcome codes
_OK = 0
_CAPACITY = 1


class CFLError(ValueError):
    """The transport step would move a cell by more than one cell width."""


class CapacityError(RuntimeError):
    """The excess mass cannot be placed: the room is full and has no exit."""


@dataclass
class DensityGrid:
    """Densities of one or several populations on a grid, plus absorbed mass per exit cell."""

    grid: Grid
    rho: np.ndarray
    absorbed: np.ndarray | None = None

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        if rho.ndim == 2:
            rho = rho[None]
        if rho.shape[1:] != self.grid.shape:
            raise ValueError(f"density shape {rho.shape[1:]} does not match grid {self.grid.shape}")
        if np.any(rho < 0):
            raise ValueError("densities must be non-negative")
        if np.any(rho[:, ~self.grid.open_mask] != 0):
            raise ValueError("wall cells must carry zero density")
        self.rho = np.ascontiguousarray(rho)
        if self.absorbed is None:
            self.absorbed = np.zeros_like(self.rho)
        else:
            self.absorbed = np.asarray(self.absorbed, dtype=float).reshape(self.rho.shape).copy()

    @classmethod
    def unchecked(cls, grid: Grid, rho: np.ndarray, absorbed: np.ndarray) -> "DensityGrid":
        """Wrap arrays without validation (predicted densities may exceed 1)."""
        obj = cls.__new__(cls)
        obj.grid = grid
        obj.rho = np.ascontiguousarray(rho)
        obj.absorbed = absorbed
        return obj

    @property
    def populations(self) -> int:
        return self.rho.shape[0]

    @property
    def total(self) -> np.ndarray:
        """Summed density over populations, shape ``(nx, ny)``."""
        return self.rho.sum(axis=0)

    def interior_mass(self) -> np.ndarray:
        """Per-population mass inside the room."""
        return self.rho.sum(axis=(1, 2)) * self.grid.cell_area

    def absorbed_mass(self) -> np.ndarray:
        return self.absorbed.sum(axis=(1, 2)) * self.grid.cell_area

    def copy(self) -> "DensityGrid":
        return DensityGrid(self.grid, self.rho.copy(), self.absorbed.copy())

    def is_feasible(self) -> bool:
        return bool(np.all(self.rho >= 0) and np.all(self.total <= 1.0))


@dataclass
class ProjectionParams:
    seed: int = 0
    quantum: float = 1.0  # largest excess (in cell capacities) carried by one walker
    order: str = "row-major"
    neighborhood: int = 4
    max_walk_steps: int = 10**9

    def __post_init__(self):
        if not self.quantum > 0:
            raise ValueError("quantum must be positive")
        if self.order != "row-major":
            raise ValueError("only row-major source ordering is implemented")
        if self.neighborhood != 4:
            raise ValueError("only the 4-neighbor walk is implemented")


def _check_cfl(grid: Grid, U: np.ndarray, tau: float) -> None:
    if not tau > 0:
        raise ValueError("tau must be positive")
    sx = np.abs(U[..., 0]).max(initial=0.0) * tau / grid.dx
    sy = np.abs(U[..., 1]).max(initial=0.0) * tau / grid.dy
    if max(sx, sy) > 1.0 + 1e-12:
        raise CFLError(f"tau*|U| moves mass by {max(sx, sy):.3f} cells; at most one cell per step is allowed")


def transport_density(
    rho: DensityGrid, U: VelocityField | np.ndarray, tau: float, periodic_x: bool = False
) -> DensityGrid:
    """Translate every cell rigidly by ``tau * U(center)`` and split its mass by overlap area.

    Mass aimed at a wall cell or outside the grid stays in its source cell,
    except that exit cells push such mass out of the room (absorbed tally).
    """
    grid = rho.grid
    Uv = U.values if isinstance(U, VelocityField) else np.asarray(U, dtype=float)
    per_pop = Uv.ndim == 4
    if per_pop:
        for p in range(rho.populations):
            _check_cfl(grid, Uv[p][grid.open_mask], tau)
    else:
        _check_cfl(grid, Uv[grid.open_mask], tau)
    nx, ny = grid.shape
    open_ = grid.open_mask
    is_exit = grid.exit_mask
    out = np.zeros_like(rho.rho)
    absorbed = rho.absorbed.copy()
    I, J = np.nonzero(open_)
    src = I * ny + J
    for p in range(rho.populations):
        u = Uv[p] if per_pop else Uv
        m = rho.rho[p, I, J]
        sx = u[I, J, 0] * tau / grid.dx
        sy = u[I, J, 1] * tau / grid.dy
        fx, fy = np.floor(sx), np.floor(sy)
        ax, ay = sx - fx, sy - fy
        fx, fy = fx.astype(np.int64), fy.astype(np.int64)
        flat = np.zeros(nx * ny)
        lost = np.zeros(nx * ny)
        for ox, wx in ((0, 1.0 - ax), (1, ax)):
            for oy, wy in ((0, 1.0 - ay), (1, ay)):
                w = wx * wy * m
                ti = I + fx + ox
                tj = J + fy + oy
                if periodic_x:
                    ti = ti % nx
                inside = (ti >= 0) & (ti < nx) & (tj >= 0) & (tj < ny)
                ok = inside.copy()
                ok[inside] = open_[ti[inside], tj[inside]]
                flat += np.bincount(ti[ok] * ny + tj[ok], weights=w[ok], minlength=nx * ny)
                blocked = ~ok
                if blocked.any():
                    lost += np.bincount(src[blocked], weights=w[blocked], minlength=nx * ny)
        lost = lost.reshape(nx, ny)
        out[p] = flat.reshape(nx, ny) + np.where(is_exit, 0.0, lost)
        absorbed[p] += np.where(is_exit, lost, 0.0)
    return DensityGrid.unchecked(grid, out, absorbed)


@numba.njit(cache=True)
def _clamp_total(rho, carried, i, j):
    """Push round-off above capacity back into ``carried`` so the cell total is at most 1."""
    P = rho.shape[0]
    for _ in range(64):
        tot = 0.0
        big = 0
        for k in range(P):
            tot += rho[k, i, j]
            if rho[k, i, j] > rho[big, i, j]:
                big = k
        if tot <= 1.0:
            return
        old = rho[big, i, j]
        new = min(old - (tot - 1.0), np.nextafter(old, 0.0))
        rho[big, i, j] = new
        carried[big] += old - new


@numba.njit(cache=True)
def _deposit(rho, carried, i, j, single):
    """Fill cell (i, j) from ``carried``; returns the total still carried."""
    P = rho.shape[0]
    tot = 0.0
    for k in range(P):
        tot += rho[k, i, j]
    if tot >= 1.0:
        return carried.sum()
    cap = 1.0 - tot
    if single >= 0:
        c = carried[single]
        if c <= cap:
            rho[single, i, j] += c
            carried[single] = 0.0
            if P > 1:
                _clamp_total(rho, carried, i, j)
            return carried.sum()
        old = rho[single, i, j]
        rho[single, i, j] = 1.0 - (tot - old)
        carried[single] = c - cap
        if P > 1:
            _clamp_total(rho, carried, i, j)
        return carried[single]
    C = carried.sum()
    if C <= cap:
        for k in range(P):
            rho[k, i, j] += carried[k]
            carried[k] = 0.0
        _clamp_total(rho, carried, i, j)
        return carried.sum()
    f = cap / C
    for k in range(P):
        d = carried[k] * f
        rho[k, i, j] += d
        carried[k] -= d
    _clamp_total(rho, carried, i, j)
    return carried.sum()


@numba.njit(cache=True)
def _project_kernel(rho, flags, seed, quantum, max_steps):
    np.random.seed(seed)
    P, nx, ny = rho.shape
    od = np.zeros((nx, ny))
    absorbed = np.zeros((P, nx, ny))
    carried = np.zeros(P)
    chunk = np.zeros(P)
    steps = 0
    di = np.array([1, -1, 0, 0])
    dj = np.array([0, 0, 1, -1])
    for si in range(nx):
        for sj in range(ny):
            if flags[si, sj] == 1:
                continue
            tot = 0.0
            nz = 0
            single = -1
            for k in range(P):
                tot += rho[k, si, sj]
                if rho[k, si, sj] > 0:
                    nz += 1
                    single = k
            if tot <= 1.0:
                continue
            if nz != 1:
                single = -1
            excess = tot - 1.0
            # take the excess off the source, population by population
            if single >= 0:
                carried[:] = 0.0
                carried[single] = excess
                rho[single, si, sj] = 1.0
            else:
                for k in range(P):
                    carried[k] = rho[k, si, sj] * (excess / tot)
                    rho[k, si, sj] -= carried[k]
                _clamp_total(rho, carried, si, sj)
                excess = carried.sum()
            if flags[si, sj] == 2:
                for k in range(P):
                    absorbed[k, si, sj] += carried[k]
                od[si, sj] += excess
                continue
            remaining = excess
            while remaining > 0.0:
                c = min(quantum, remaining)
                if c >= remaining:
                    for k in range(P):
                        chunk[k] = carried[k]
                        carried[k] = 0.0
                    remaining = 0.0
                else:
                    for k in range(P):
                        chunk[k] = carried[k] * (c / remaining)
                        carried[k] -= chunk[k]
                    remaining -= c
                i, j = si, sj
                load = c
                while load > 0.0:
                    steps += 1
                    if steps > max_steps:
                        return od, absorbed, _CAPACITY
                    d = np.random.randint(0, 4)
                    ti = i + di[d]
                    tj = j + dj[d]
                    if ti < 0 or ti >= nx or tj < 0 or tj >= ny or flags[ti, tj] == 1:
                        continue
                    od[i, j] += load
                    i, j = ti, tj
                    if flags[i, j] == 2:
                        for k in range(P):
                            absorbed[k, i, j] += chunk[k]
                            chunk[k] = 0.0
                        load = 0.0
                    else:
                        load = _deposit(rho, chunk, i, j, single)
    return od, absorbed, _OK


def step_seed(seed: int, step: int) -> int:
    """Per-step walk seed derived from the run seed."""
    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1, dtype=np.uint32)[0])


def stochastic_project(
    rho_pred: DensityGrid, params: ProjectionParams | None = None, step: int = 0
) -> tuple[DensityGrid, np.ndarray]:
    """Random-walk correction of a predicted density; returns the feasible density and the odometer."""
    params = params or ProjectionParams()
    grid = rho_pred.grid
    rho = np.array(rho_pred.rho, dtype=float, copy=True)
    if np.any(rho < 0):
        raise ValueError("predicted densities must be non-negative")
    flags = np.ascontiguousarray(grid.flags, dtype=np.int8)
    tot = rho.sum(axis=0)
    if not np.any(tot > 1.0):
        return DensityGrid.unchecked(grid, rho, rho_pred.absorbed.copy()), np.zeros(grid.shape)
    if not grid.exit_mask.any() and tot.sum() > grid.open_mask.sum():
        raise CapacityError(f"mass {tot.sum():.6g} exceeds the room capacity {grid.open_mask.sum()} and there is no exit")
    od, absorbed, status = _project_kernel(rho, flags, step_seed(params.seed, step), float(params.quantum), params.max_walk_steps)
    if status == _CAPACITY:
        raise CapacityError(f"random walks exceeded {params.max_walk_steps} steps")
    return DensityGrid.unchecked(grid, rho, rho_pred.absorbed + absorbed), od


def pressure_from_odometer(od) -> np.ndarray:
    """Pressure per cell: the odometer, or the sum of a sequence of odometers over a window."""
    if isinstance(od, (list, tuple)):
        if not od:
            raise ValueError("empty odometer window")
        return np.sum(np.asarray(od, dtype=float), axis=0)
    return np.asarray(od, dtype=float).copy()


@dataclass
class MacroState:
    density: DensityGrid
    time: float = 0.0
    step: int = 0
    odometer: np.ndarray | None = None
    absorbed_history: list = field(default_factory=list)

    def copy(self) -> "MacroState":
        return MacroState(
            self.density.copy(),
            self.time,
            self.step,
            None if self.odometer is None else self.odometer.copy(),
            list(self.absorbed_history),
        )


def step_macro(state: MacroState, tau: float, U, params: ProjectionParams | None = None) -> MacroState:
    """Transport then project; ``U`` is one field shared by all populations or one per population."""
    pred = transport_density(state.density, U, tau)
    new, od = stochastic_project(pred, params, state.step)
    hist = state.absorbed_history + [float(new.absorbed.sum() * new.grid.cell_area)]
    return MacroState(new, state.time + tau, state.step + 1, od, hist)


def step_macro_two_populations(state: MacroState, tau: float, U1, U2, params: ProjectionParams | None = None) -> MacroState:
    """Each population follows its own field; one shared walk corrects the joint excess."""
    if state.density.populations != 2:
        raise ValueError("the state must hold exactly two populations")
    v1 = U1.values if isinstance(U1, VelocityField) else np.asarray(U1, dtype=float)
    v2 = U2.values if isinstance(U2, VelocityField) else np.asarray(U2, dtype=float)
    return step_macro(state, tau, np.stack([v1, v2]), params)


def density_dependent_velocity(
    rho: DensityGrid, U: VelocityField, alpha: Callable[[np.ndarray], np.ndarray]
) -> VelocityField:
    """Scale ``U`` cellwise by ``alpha`` of the total density one cell downstream."""
    grid = rho.grid
    tot = rho.total
    u = U.values
    speed = np.hypot(u[..., 0], u[..., 1])
    X, Y = grid.centers()
    with np.errstate(invalid="ignore", divide="ignore"):
        px = X + grid.dx * np.where(speed > 0, u[..., 0] / speed, 0.0)
        py = Y + grid.dy * np.where(speed > 0, u[..., 1] / speed, 0.0)
    ii = np.rint((px - grid.x0) / grid.dx - 0.5).astype(np.int64)
    jj = np.rint((py - grid.y0) / grid.dy - 0.5).astype(np.int64)
    I, J = np.indices(grid.shape)
    ok = (ii >= 0) & (ii < grid.nx) & (jj >= 0) & (jj < grid.ny)
    ok[ok] = grid.open_mask[ii[ok], jj[ok]]
    ii = np.where(ok, ii, I)
    jj = np.where(ok, jj, J)
    a = np.asarray(alpha(tot[ii, jj]), dtype=float)
    if np.any(a < 0) or np.any(a > 1) or not np.all(np.isfinite(a)):
        raise ValueError("alpha must take values in [0, 1]")
    out = u * a[..., None]
    out[~grid.open_mask] = 0.0
    return VelocityField(grid, out)


def linear_alpha(rho):
    """``alpha(rho) = 1 - rho`` clipped to ``[0, 1]``."""
    return np.clip(1.0 - np.asarray(rho, dtype=float), 0.0, 1.0)


def feasible_mask(rho: DensityGrid) -> np.ndarray:
    return (rho.total <= 1.0) & np.all(rho.rho >= 0, axis=0)


def saturated_mask(rho: DensityGrid, level: float = 1.0 - 1e-9) -> np.ndarray:
    return rho.total >= level


def interior_open(grid: Grid) -> np.ndarray:
    return grid.flags == INTERIOR


def exit_cells(grid: Grid) -> np.ndarray:
    return grid.flags == EXIT
