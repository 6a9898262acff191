"""Room geometry, cell grids, distance-to-exit and desired velocity fields.

Grids are indexed ``[i, j]`` with ``i`` along x and ``j`` along y; cell
``(i, j)`` has its center at ``(x0 + (i + 0.5) dx, y0 + (j + 0.5) dy)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from heapq import heappop as heapq_pop
from heapq import heappush as heapq_push

import numpy as np
import shapely
from numba import njit
from shapely.geometry import LineString, Polygon

INTERIOR = 0
WALL = 1
EXIT = 2

_ON_EDGE_TOL = 1e-9


def _as_polygon_array(points, what: str) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{what}: expected a list of (x, y) vertices, got shape {arr.shape}")
    if len(arr) > 1 and np.allclose(arr[0], arr[-1]):
        arr = arr[:-1]
    if len(arr) < 3:
        raise ValueError(f"{what}: a polygon needs at least 3 distinct vertices")
    return arr


@dataclass
class Room:
    """Polygonal room: outer wall, obstacles, and exit segments on the outer wall."""

    outer: np.ndarray
    obstacles: list = field(default_factory=list)
    exits: list = field(default_factory=list)

    def __post_init__(self):
        self.outer = _as_polygon_array(self.outer, "outer boundary")
        self.obstacles = [_as_polygon_array(o, f"obstacle {k}") for k, o in enumerate(self.obstacles)]
        exits = []
        for k, seg in enumerate(self.exits):
            seg = np.asarray(seg, dtype=float)
            if seg.shape != (2, 2):
                raise ValueError(f"exit {k}: expected two endpoints, got shape {seg.shape}")
            if np.linalg.norm(seg[1] - seg[0]) <= 0:
                raise ValueError(f"exit {k}: zero-length segment")
            exits.append(seg)
        self.exits = exits
        self._validate()

    def _validate(self):
        poly = Polygon(self.outer)
        if not poly.exterior.is_simple or poly.area <= 0 or not poly.is_valid:
            raise ValueError("outer boundary is degenerate or self-intersecting")
        obs = []
        for k, o in enumerate(self.obstacles):
            p = Polygon(o)
            if not p.exterior.is_simple or p.area <= 0 or not p.is_valid:
                raise ValueError(f"obstacle {k} is degenerate or self-intersecting")
            if not poly.contains(p):
                raise ValueError(f"obstacle {k} is not inside the outer boundary")
            for m, q in enumerate(obs):
                if p.intersects(q):
                    raise ValueError(f"obstacles {m} and {k} intersect")
            obs.append(p)
        scale = max(np.ptp(self.outer, axis=0))
        for k, seg in enumerate(self.exits):
            if self._edge_of(seg, scale) is None:
                raise ValueError(f"exit {k} does not lie on an edge of the outer boundary")

    @property
    def polygon(self) -> Polygon:
        return Polygon(self.outer, holes=None)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        lo = self.outer.min(axis=0)
        hi = self.outer.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def _edges(self, poly: np.ndarray):
        for a, b in zip(poly, np.roll(poly, -1, axis=0)):
            yield a, b

    def _edge_of(self, seg: np.ndarray, scale: float):
        """Index of the outer edge containing ``seg``, with its edge parameters."""
        tol = _ON_EDGE_TOL * max(scale, 1.0)
        for k, (a, b) in enumerate(self._edges(self.outer)):
            ab = b - a
            length2 = ab @ ab
            ts = []
            for p in seg:
                t = (p - a) @ ab / length2
                if np.linalg.norm(a + t * ab - p) > tol:
                    break
                ts.append(t)
            else:
                lo, hi = min(ts), max(ts)
                slack = tol / math.sqrt(length2)
                if lo >= -slack and hi <= 1 + slack:
                    return k, max(lo, 0.0), min(hi, 1.0)
        return None

    def wall_segments(self) -> np.ndarray:
        """All solid wall segments, shape ``(K, 2, 2)``: outer edges minus exits, plus obstacle edges."""
        scale = max(np.ptp(self.outer, axis=0))
        cuts: dict[int, list[tuple[float, float]]] = {}
        for seg in self.exits:
            k, lo, hi = self._edge_of(seg, scale)
            cuts.setdefault(k, []).append((lo, hi))
        out = []
        for k, (a, b) in enumerate(self._edges(self.outer)):
            pieces = [(0.0, 1.0)]
            for lo, hi in sorted(cuts.get(k, [])):
                nxt = []
                for s, e in pieces:
                    if hi <= s or lo >= e:
                        nxt.append((s, e))
                        continue
                    if lo > s:
                        nxt.append((s, lo))
                    if hi < e:
                        nxt.append((hi, e))
                pieces = nxt
            for s, e in pieces:
                if e - s > 1e-12:
                    out.append([a + s * (b - a), a + e * (b - a)])
        for poly in self.obstacles:
            for a, b in self._edges(poly):
                out.append([a, b])
        return np.asarray(out, dtype=float).reshape(-1, 2, 2)

    def exit_segments(self) -> np.ndarray:
        return np.asarray(self.exits, dtype=float).reshape(-1, 2, 2)

    def contains(self, points) -> np.ndarray:
        """True for points strictly inside the walkable region (outer minus obstacles)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = shapely.contains_xy(Polygon(self.outer), pts[:, 0], pts[:, 1])
        for o in self.obstacles:
            inside &= ~shapely.intersects_xy(Polygon(o), pts[:, 0], pts[:, 1])
        return inside


@dataclass
class Grid:
    x0: float
    y0: float
    dx: float
    dy: float
    nx: int
    ny: int
    flags: np.ndarray
    exit_id: np.ndarray
    room: Room | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def xc(self) -> np.ndarray:
        return self.x0 + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def yc(self) -> np.ndarray:
        return self.y0 + (np.arange(self.ny) + 0.5) * self.dy

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xc, self.yc, indexing="ij")

    @property
    def open_mask(self) -> np.ndarray:
        """Cells that can hold people (interior or exit)."""
        return self.flags != WALL

    @property
    def exit_mask(self) -> np.ndarray:
        return self.flags == EXIT

    def cell_of(self, points) -> tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        i = np.floor((pts[:, 0] - self.x0) / self.dx).astype(int)
        j = np.floor((pts[:, 1] - self.y0) / self.dy).astype(int)
        return np.clip(i, 0, self.nx - 1), np.clip(j, 0, self.ny - 1)

    def same_geometry(self, other: "Grid") -> bool:
        return (
            self.shape == other.shape
            and np.allclose([self.x0, self.y0, self.dx, self.dy], [other.x0, other.y0, other.dx, other.dy])
            and np.array_equal(self.flags, other.flags)
        )


def build_grid(room: Room, resolution: float) -> Grid:
    """Cover the room's bounding box with square cells of side ``resolution``.

    A cell is a wall if its center is outside the room or inside an obstacle.
    An open cell is an exit cell if an exit segment runs through (or along)
    its square over a positive length.
    """
    if not resolution > 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    xmin, ymin, xmax, ymax = room.bounds
    nx = max(1, int(math.ceil((xmax - xmin) / resolution - 1e-9)))
    ny = max(1, int(math.ceil((ymax - ymin) / resolution - 1e-9)))
    dx = dy = float(resolution)
    xs = xmin + (np.arange(nx) + 0.5) * dx
    ys = ymin + (np.arange(ny) + 0.5) * dy
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    inside = room.contains(np.column_stack([X.ravel(), Y.ravel()])).reshape(nx, ny)
    flags = np.where(inside, INTERIOR, WALL).astype(np.int8)
    exit_id = np.full((nx, ny), -1, dtype=np.int64)
    tol = 1e-9 * resolution
    for k, seg in enumerate(room.exits):
        line = LineString(seg)
        lo = seg.min(axis=0)
        hi = seg.max(axis=0)
        i0 = max(int(np.floor((lo[0] - xmin) / dx)) - 1, 0)
        i1 = min(int(np.floor((hi[0] - xmin) / dx)) + 2, nx)
        j0 = max(int(np.floor((lo[1] - ymin) / dy)) - 1, 0)
        j1 = min(int(np.floor((hi[1] - ymin) / dy)) + 2, ny)
        ii, jj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
        ii, jj = ii.ravel(), jj.ravel()
        boxes = shapely.box(
            xmin + ii * dx - tol, ymin + jj * dy - tol, xmin + (ii + 1) * dx + tol, ymin + (jj + 1) * dy + tol
        )
        hit = (shapely.length(shapely.intersection(boxes, line)) > 2 * tol) & inside[ii, jj]
        if not hit.any():
            # short exit on a slanted edge: take open cells hugging the segment
            centers = np.column_stack([xmin + (ii + 0.5) * dx, ymin + (jj + 0.5) * dy])
            dist, _ = point_segment_distance(centers, seg[None])
            hit = (dist[:, 0] <= 0.5 * math.hypot(dx, dy) * (1 + 1e-9)) & inside[ii, jj]
            if not hit.any() and inside[ii, jj].any():
                d_in = np.where(inside[ii, jj], dist[:, 0], np.inf)
                hit = d_in <= d_in.min() * (1 + 1e-9)
        flags[ii[hit], jj[hit]] = EXIT
        exit_id[ii[hit], jj[hit]] = k
    return Grid(xmin, ymin, dx, dy, nx, ny, flags, exit_id, room)


@dataclass
class DistanceField:
    grid: Grid
    values: np.ndarray  # +inf on walls and on cells cut off from every exit

    @property
    def reachable(self) -> np.ndarray:
        return np.isfinite(self.values)

    @property
    def disconnected(self) -> np.ndarray:
        """Open cells with no path to an exit."""
        return self.grid.open_mask & ~np.isfinite(self.values)


@dataclass
class VelocityField:
    grid: Grid
    values: np.ndarray  # (nx, ny, 2)

    @property
    def max_speed(self) -> float:
        if self.values.size == 0:
            return 0.0
        return float(np.sqrt((self.values**2).sum(axis=-1)).max())


def _project_on_segment(p: np.ndarray, seg: np.ndarray) -> np.ndarray:
    a, b = seg
    ab = b - a
    t = np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0)
    return a + t * ab


_NEIGHBORS = np.array([(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)], dtype=np.int64)


@njit(cache=True)
def _line_of_sight(open_, x0, y0, dx, dy, xs, ys, xe, ye):
    # sample the segment from (xs, ys) to (xe, ye); the last cell around the
    # end point is skipped because exit anchors sit on the boundary itself
    nx, ny = open_.shape
    length = math.hypot(xe - xs, ye - ys)
    h = 0.25 * min(dx, dy)
    n = int(length / h) + 1
    skip = 0.75 * max(dx, dy)
    for s in range(1, n):
        t = s / n
        px = xs + t * (xe - xs)
        py = ys + t * (ye - ys)
        if (1.0 - t) * length < skip:
            break
        fi = (px - x0) / dx
        fj = (py - y0) / dy
        ci = int(math.floor(fi))
        cj = int(math.floor(fj))
        if ci < 0 or cj < 0 or ci >= nx or cj >= ny or not open_[ci, cj]:
            return False
        # forbid slipping diagonally between two wall cells touching at a corner
        ri = fi - ci
        rj = fj - cj
        if abs(ri - 0.5) > 0.375 and abs(rj - 0.5) > 0.375:
            oi = ci + (1 if ri > 0.5 else -1)
            oj = cj + (1 if rj > 0.5 else -1)
            if 0 <= oi < nx and 0 <= oj < ny:
                if not open_[oi, cj] and not open_[ci, oj]:
                    return False
    return True


@njit(cache=True)
def _dijkstra_any_angle(open_, seed_i, seed_j, seed_d, seed_ax, seed_ay, x0, y0, dx, dy, neighbors):
    nx, ny = open_.shape
    D = np.full((nx, ny), np.inf)
    done = np.zeros((nx, ny), dtype=np.bool_)
    ax = np.zeros((nx, ny))
    ay = np.zeros((nx, ny))
    abase = np.zeros((nx, ny))
    heap = [(0.0, np.int64(0))]
    heap.pop()
    for s in range(seed_i.shape[0]):
        i = seed_i[s]
        j = seed_j[s]
        D[i, j] = seed_d[s]
        ax[i, j] = seed_ax[s]
        ay[i, j] = seed_ay[s]
        abase[i, j] = 0.0
        heapq_push(heap, (seed_d[s], np.int64(i * ny + j)))
    while len(heap) > 0:
        d, flat = heapq_pop(heap)
        i = flat // ny
        j = flat % ny
        if done[i, j] or d > D[i, j]:
            continue
        done[i, j] = True
        xi = x0 + (i + 0.5) * dx
        yj = y0 + (j + 0.5) * dy
        for n in range(neighbors.shape[0]):
            vi = i + neighbors[n, 0]
            vj = j + neighbors[n, 1]
            if vi < 0 or vj < 0 or vi >= nx or vj >= ny:
                continue
            if not open_[vi, vj] or done[vi, vj]:
                continue
            if neighbors[n, 0] != 0 and neighbors[n, 1] != 0:
                if not open_[vi, j] or not open_[i, vj]:
                    continue
            xv = x0 + (vi + 0.5) * dx
            yv = y0 + (vj + 0.5) * dy
            if _line_of_sight(open_, x0, y0, dx, dy, xv, yv, ax[i, j], ay[i, j]):
                cand = abase[i, j] + math.hypot(xv - ax[i, j], yv - ay[i, j])
                cax, cay, cb = ax[i, j], ay[i, j], abase[i, j]
            else:
                cand = D[i, j] + math.hypot(xv - xi, yv - yj)
                cax, cay, cb = xi, yj, D[i, j]
            if cand < D[vi, vj]:
                D[vi, vj] = cand
                ax[vi, vj] = cax
                ay[vi, vj] = cay
                abase[vi, vj] = cb
                heapq_push(heap, (cand, np.int64(vi * ny + vj)))
    return D


def _strict_crossings(p0: np.ndarray, p1: np.ndarray, walls: np.ndarray) -> np.ndarray:
    """Whether each path ``p0[k] -> p1[k]`` properly crosses any wall (touching does not count)."""
    if len(walls) == 0:
        return np.zeros(len(p0), dtype=bool)
    a = walls[None, :, 0, :]
    b = walls[None, :, 1, :]
    s = p0[:, None, :]
    e = p1[:, None, :]

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    scale = np.abs(walls).max() + 1.0
    eps = 1e-10 * scale * scale
    d1 = orient(a, b, s)
    d2 = orient(a, b, e)
    d3 = orient(s, e, a)
    d4 = orient(s, e, b)
    d1, d2, d3, d4 = (np.where(np.abs(d) < eps, 0.0, d) for d in (d1, d2, d3, d4))
    return ((d1 * d2 < 0) & (d3 * d4 < 0)).any(axis=1)


def compute_distance_field(grid: Grid) -> DistanceField:
    """Geodesic distance from every open cell to the exit set.

    Cells that see their nearest exit point directly get the exact straight
    distance. The rest is filled by Dijkstra over the 8-neighbor cell graph
    (no corner cutting past walls) with any-angle relaxation: a cell inherits
    a neighbor's anchor point when it sees that anchor, so paths bend only at
    obstacle corners. D is forced to 0 on exit cells.
    """
    ei, ej = np.nonzero(grid.flags == EXIT)
    if len(ei) == 0:
        raise ValueError("grid has no exit cell")
    X, Y = grid.centers()
    seed_i, seed_j, seed_d, seed_a = [ei], [ej], [np.zeros(len(ei))], []
    if grid.room is not None:
        exits = grid.room.exit_segments()
        walls = grid.room.wall_segments()
        for i, j in zip(ei, ej):
            c = np.array([X[i, j], Y[i, j]])
            seed_a.append(_project_on_segment(c, exits[grid.exit_id[i, j]]))
        oi, oj = np.nonzero(grid.open_mask & (grid.flags != EXIT))
        if len(oi):
            P = np.column_stack([X[oi, oj], Y[oi, oj]])
            dist, closest = point_segment_distance(P, exits)
            k = dist.argmin(axis=1)
            best = closest[np.arange(len(P)), k]
            visible = ~_strict_crossings(P, best, walls)
            seed_i.append(oi[visible])
            seed_j.append(oj[visible])
            seed_d.append(dist[np.arange(len(P)), k][visible])
            seed_a.extend(best[visible])
    else:
        seed_a.extend(np.column_stack([X[ei, ej], Y[ei, ej]]))
    anchors = np.asarray(seed_a, dtype=float).reshape(-1, 2)
    D = _dijkstra_any_angle(
        np.ascontiguousarray(grid.open_mask),
        np.concatenate(seed_i).astype(np.int64),
        np.concatenate(seed_j).astype(np.int64),
        np.concatenate(seed_d).astype(float),
        anchors[:, 0].copy(),
        anchors[:, 1].copy(),
        grid.x0,
        grid.y0,
        grid.dx,
        grid.dy,
        _NEIGHBORS,
    )
    D[grid.flags == WALL] = np.inf
    D[grid.flags == EXIT] = 0.0
    return DistanceField(grid, D)


def _axis_gradient(D: np.ndarray, valid: np.ndarray, h: float, axis: int) -> np.ndarray:
    Dm = np.moveaxis(D, axis, 0)
    vm = np.moveaxis(valid, axis, 0)
    g = np.zeros_like(Dm)
    n = Dm.shape[0]
    if n == 1:
        return np.moveaxis(g, 0, axis)
    fwd = np.zeros_like(vm)
    bwd = np.zeros_like(vm)
    fwd[:-1] = vm[1:] & vm[:-1]
    bwd[1:] = vm[:-1] & vm[1:]
    Dp = np.zeros_like(Dm)
    Dn = np.zeros_like(Dm)
    Dp[:-1] = np.where(fwd[:-1], Dm[1:], 0.0)
    Dn[1:] = np.where(bwd[1:], Dm[:-1], 0.0)
    Dc = np.where(vm, Dm, 0.0)
    both = fwd & bwd
    g = np.where(both, (Dp - Dn) / (2 * h), g)
    g = np.where(fwd & ~bwd, (Dp - Dc) / h, g)
    g = np.where(bwd & ~fwd, (Dc - Dn) / h, g)
    return np.moveaxis(g, 0, axis)


def desired_velocity_from_distance(D: DistanceField, speed: float = 1.0, normalize: bool = True) -> VelocityField:
    """Desired velocity pointing down the distance field.

    With ``normalize`` the field is ``-speed * grad D / |grad D|``; otherwise
    ``-speed * grad D`` with its norm capped at ``speed``. Central differences,
    one-sided next to walls; zero where the gradient vanishes.
    """
    grid = D.grid
    valid = grid.open_mask & np.isfinite(D.values)
    Dv = np.where(valid, D.values, 0.0)
    gx = _axis_gradient(Dv, valid, grid.dx, 0)
    gy = _axis_gradient(Dv, valid, grid.dy, 1)
    norm = np.hypot(gx, gy)
    U = np.zeros(grid.shape + (2,))
    nz = valid & (norm > 1e-12)
    if normalize:
        U[nz, 0] = -speed * gx[nz] / norm[nz]
        U[nz, 1] = -speed * gy[nz] / norm[nz]
    else:
        scale = np.where(norm > 1.0, 1.0 / np.maximum(norm, 1e-300), 1.0)
        U[nz, 0] = -speed * gx[nz] * scale[nz]
        U[nz, 1] = -speed * gy[nz] * scale[nz]
    return VelocityField(grid, U)


def sample_velocities(field: VelocityField, points) -> np.ndarray:
    """Bilinear interpolation of cell-centered values at many points, shape ``(N, 2)``.

    Wall cells are dropped from the stencil and the remaining weights
    renormalized, so a point next to a wall is not slowed down by the wall's
    zero velocity. Points outside the grid are clamped onto the boundary cells.
    """
    g = field.grid
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    fx = np.clip((pts[:, 0] - g.x0) / g.dx - 0.5, 0.0, g.nx - 1)
    fy = np.clip((pts[:, 1] - g.y0) / g.dy - 0.5, 0.0, g.ny - 1)
    i0 = np.minimum(np.floor(fx).astype(int), max(g.nx - 2, 0))
    j0 = np.minimum(np.floor(fy).astype(int), max(g.ny - 2, 0))
    i1 = np.minimum(i0 + 1, g.nx - 1)
    j1 = np.minimum(j0 + 1, g.ny - 1)
    tx = fx - i0
    ty = fy - j0
    open_ = g.open_mask
    out = np.zeros((len(pts), 2))
    wsum = np.zeros(len(pts))
    for ii, jj, w in (
        (i0, j0, (1 - tx) * (1 - ty)),
        (i1, j0, tx * (1 - ty)),
        (i0, j1, (1 - tx) * ty),
        (i1, j1, tx * ty),
    ):
        w = np.where(open_[ii, jj], w, 0.0)
        out += w[:, None] * field.values[ii, jj]
        wsum += w
    ok = wsum > 0
    out[ok] /= wsum[ok, None]
    out[~ok] = 0.0
    return out


def sample_velocity(field: VelocityField, point) -> np.ndarray:
    return sample_velocities(field, np.asarray(point, dtype=float)[None, :])[0]


def point_segment_distance(points: np.ndarray, segments: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distances ``(N, K)`` and closest points ``(N, K, 2)`` from points to segments."""
    a = segments[None, :, 0, :]
    b = segments[None, :, 1, :]
    p = points[:, None, :]
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(p - closest, axis=-1), closest


def segments_cross(p0: np.ndarray, p1: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """Whether each path ``p0[k] -> p1[k]`` meets the segment ``seg`` (touching counts)."""
    a, b = seg

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    d1 = orient(a, b, p0)
    d2 = orient(a, b, p1)
    d3 = orient(p0, p1, a)
    d4 = orient(p0, p1, b)
    proper = (d1 * d2 <= 0) & (d3 * d4 <= 0)
    moving = np.any(p0 != p1, axis=-1)
    return proper & moving & ~((d1 == 0) & (d2 == 0))


def distance_field_to_csv(D: DistanceField, path) -> None:
    """Write D as a CSV grid (rows = y from top, columns = x); -1 marks walls and unreachable cells."""
    vals = np.where(np.isfinite(D.values), D.values, -1.0)
    np.savetxt(path, vals.T[::-1], delimiter=",", fmt="%.10g")
