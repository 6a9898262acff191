"""Microscopic model: rigid disks, contact constraints and the projected step.

A step predicts ``q~ = q + tau U`` and then projects ``q~`` onto the convex
set obtained by linearizing every near contact at the current configuration::

    q_new = q~ + sum_k lambda_k G_k
    D_k(q) + G_k . (q_new - q) >= 0,  lambda_k >= 0,  complementarity.

Disk-disk gaps are ``|q_j - q_i| - 2r`` with gradient ``-e_ij`` in slot ``i``
and ``+e_ij`` in slot ``j``. Disk-wall gaps are ``dist(q_i, segment) - r``.
Both gaps are convex in ``q``, so a configuration satisfying the linearized
constraints is also non-overlapping.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import sparse
from scipy.optimize import nnls

from .geometry import point_segment_distance, segments_cross

log = logging.getLogger(__name__)


class InvalidConfiguration(ValueError):
    """Coincident centers, or a center lying on a wall."""


class UzawaError(RuntimeError):
    """The projection did not reach the KKT tolerance."""

    def __init__(self, msg, iterations, residual, primal):
        super().__init__(msg)
        self.iterations = iterations
        self.residual = residual
        self.primal = primal


@dataclass
class Configuration:
    positions: np.ndarray
    radius: float
    exited: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.exited is None:
            self.exited = np.zeros(len(self.positions), dtype=bool)
        else:
            self.exited = np.asarray(self.exited, dtype=bool).copy()

    def __len__(self):
        return len(self.positions)

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(~self.exited)

    def copy(self) -> "Configuration":
        return Configuration(self.positions.copy(), self.radius, self.exited.copy())


@dataclass
class ContactConstraint:
    """One gap function with its gradient.

    ``j`` is the second disk, or -1 for a wall; ``wall`` is the wall segment
    index, or -1 for a disk pair. ``e`` is the unit vector such that the
    gradient is ``-e`` in slot ``i`` and ``+e`` in slot ``j`` (walls: ``-e``
    in slot ``i`` only, ``e`` pointing from the disk toward the wall).
    """

    i: int
    j: int
    wall: int
    gap: float
    e: np.ndarray

    def gradient(self, n: int) -> np.ndarray:
        g = np.zeros(2 * n)
        g[2 * self.i : 2 * self.i + 2] = -self.e
        if self.j >= 0:
            g[2 * self.j : 2 * self.j + 2] = self.e
        return g

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.i, self.j, self.wall)


def gap_and_gradient(q: Configuration, i: int, j: int) -> ContactConstraint:
    if i == j:
        raise ValueError("a disk has no contact with itself")
    if i > j:
        i, j = j, i
    d = q.positions[j] - q.positions[i]
    dist = math.hypot(d[0], d[1])
    if dist == 0:
        raise InvalidConfiguration(f"disks {i} and {j} have coincident centers")
    return ContactConstraint(i, j, -1, dist - 2 * q.radius, d / dist)


def wall_gap_and_gradient(q: Configuration, i: int, segment, wall: int = 0) -> ContactConstraint:
    seg = np.asarray(segment, dtype=float).reshape(1, 2, 2)
    dist, closest = point_segment_distance(q.positions[i : i + 1], seg)
    dist = float(dist[0, 0])
    if dist == 0:
        raise InvalidConfiguration(f"center of disk {i} lies on wall {wall}")
    e = (closest[0, 0] - q.positions[i]) / dist
    return ContactConstraint(i, -1, wall, dist - q.radius, e)


@dataclass
class ActiveSet:
    """Constraints stored as parallel arrays, disk pairs first (sorted by ``(i, j)``), then walls."""

    i: np.ndarray
    j: np.ndarray
    wall: np.ndarray
    gap: np.ndarray
    e: np.ndarray

    @classmethod
    def empty(cls) -> "ActiveSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), np.zeros(0), np.zeros((0, 2)))

    @classmethod
    def from_constraints(cls, cons) -> "ActiveSet":
        if not cons:
            return cls.empty()
        return cls(
            np.array([c.i for c in cons], dtype=np.int64),
            np.array([c.j for c in cons], dtype=np.int64),
            np.array([c.wall for c in cons], dtype=np.int64),
            np.array([c.gap for c in cons], dtype=float),
            np.array([c.e for c in cons], dtype=float).reshape(-1, 2),
        )

    def __len__(self):
        return len(self.i)

    def __getitem__(self, k) -> ContactConstraint:
        return ContactConstraint(int(self.i[k]), int(self.j[k]), int(self.wall[k]), float(self.gap[k]), self.e[k])

    def constraints(self) -> list[ContactConstraint]:
        return [self[k] for k in range(len(self))]

    def keys(self) -> list[tuple[int, int, int]]:
        return list(zip(self.i.tolist(), self.j.tolist(), self.wall.tolist()))

    @property
    def is_pair(self) -> np.ndarray:
        return self.j >= 0

    def concat(self, other: "ActiveSet") -> "ActiveSet":
        return ActiveSet(
            np.concatenate([self.i, other.i]),
            np.concatenate([self.j, other.j]),
            np.concatenate([self.wall, other.wall]),
            np.concatenate([self.gap, other.gap]),
            np.concatenate([self.e, other.e]),
        )

    def apply_transpose(self, lam: np.ndarray, n: int) -> np.ndarray:
        """Displacements ``sum_k lam_k G_k`` as an ``(n, 2)`` array."""
        out = np.zeros((n, 2))
        if len(lam) == 0:
            return out
        w = lam[:, None] * self.e
        for c in range(2):
            out[:, c] -= np.bincount(self.i, weights=w[:, c], minlength=n)
        pair = self.j >= 0
        if pair.any():
            for c in range(2):
                out[:, c] += np.bincount(self.j[pair], weights=w[pair, c], minlength=n)
        return out

    def apply(self, dq: np.ndarray) -> np.ndarray:
        """``G_k . dq`` for every constraint, with ``dq`` of shape ``(n, 2)``."""
        val = -(self.e * dq[self.i]).sum(axis=1)
        pair = self.j >= 0
        val[pair] += (self.e[pair] * dq[self.j[pair]]).sum(axis=1)
        return val

    def lipschitz_bound(self, n: int) -> float:
        """Row-sum bound on ``||B B^T||``: ``|G_k . G_l| <= 1`` whenever two rows share a disk."""
        if len(self) == 0:
            return 0.0
        pair = self.j >= 0
        deg = np.bincount(self.i, minlength=n) + np.bincount(self.j[pair], minlength=n)
        own = np.where(pair, 2.0, 1.0)
        row = own + (deg[self.i] - 1) + np.where(pair, deg[np.where(pair, self.j, 0)] - 1, 0)
        return float(row.max())


@numba.njit(cache=True)
def _cell_list_pairs(points, cell, cutoff):
    """Pairs ``a < b`` (indices into ``points``) with center distance <= cutoff, via a uniform cell list."""
    n = len(points)
    xmin = points[:, 0].min()
    ymin = points[:, 1].min()
    cx = np.floor((points[:, 0] - xmin) / cell).astype(np.int64)
    cy = np.floor((points[:, 1] - ymin) / cell).astype(np.int64)
    nx = cx.max() + 1
    ny = cy.max() + 1
    key = cx * ny + cy
    order = np.argsort(key)
    start = np.full(nx * ny + 1, -1, dtype=np.int64)
    count = np.zeros(nx * ny, dtype=np.int64)
    for k in range(n):
        count[key[k]] += 1
    start[0] = 0
    for c in range(nx * ny):
        start[c + 1] = start[c] + count[c]
    cap = 16 * n + 16
    out_a = np.empty(cap, dtype=np.int64)
    out_b = np.empty(cap, dtype=np.int64)
    m = 0
    c2 = cutoff * cutoff
    for a in range(n):
        for ox in range(-1, 2):
            gx = cx[a] + ox
            if gx < 0 or gx >= nx:
                continue
            for oy in range(-1, 2):
                gy = cy[a] + oy
                if gy < 0 or gy >= ny:
                    continue
                c = gx * ny + gy
                for s in range(start[c], start[c + 1]):
                    b = order[s]
                    if b <= a:
                        continue
                    dx = points[b, 0] - points[a, 0]
                    dy = points[b, 1] - points[a, 1]
                    if dx * dx + dy * dy <= c2:
                        if m == cap:
                            cap *= 2
                            na = np.empty(cap, dtype=np.int64)
                            nb = np.empty(cap, dtype=np.int64)
                            na[:m] = out_a[:m]
                            nb[:m] = out_b[:m]
                            out_a = na
                            out_b = nb
                        out_a[m] = a
                        out_b[m] = b
                        m += 1
    return out_a[:m], out_b[:m]


def close_pairs(points: np.ndarray, cutoff: float) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``a < b`` with ``|p_a - p_b| <= cutoff``, sorted lexicographically."""
    points = np.ascontiguousarray(points, dtype=float).reshape(-1, 2)
    if len(points) < 2:
        z = np.zeros(0, dtype=np.int64)
        return z, z.copy()
    # cells no smaller than the cutoff and no more than ~4N of them
    w = np.ptp(points, axis=0)
    cell = max(cutoff, math.sqrt(max(w[0] * w[1], 1e-300) / (4 * len(points))), (w.max() + 1.0) / 4096)
    a, b = _cell_list_pairs(points, cell, cutoff)
    o = np.lexsort((b, a))
    return a[o], b[o]


def brute_force_pairs(points: np.ndarray, cutoff: float) -> tuple[np.ndarray, np.ndarray]:
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    a, b = np.triu_indices(len(points), 1)
    d = np.hypot(*(points[b] - points[a]).T)
    keep = d <= cutoff
    return a[keep], b[keep]


def active_constraints(q: Configuration, eps_act: float, walls=None) -> ActiveSet:
    """All disk-disk and disk-wall constraints with gap <= eps_act among non-exited disks."""
    if eps_act < 0:
        raise ValueError("eps_act must be non-negative")
    ids = q.active
    r = q.radius
    pos = q.positions
    parts = []
    if len(ids) > 1:
        la, lb = close_pairs(pos[ids], 2 * r + eps_act)
        if len(la):
            a, b = ids[la], ids[lb]
            d = pos[b] - pos[a]
            dist = np.hypot(d[:, 0], d[:, 1])
            if np.any(dist == 0):
                k = int(np.flatnonzero(dist == 0)[0])
                raise InvalidConfiguration(f"disks {a[k]} and {b[k]} have coincident centers")
            parts.append(ActiveSet(a, b, np.full(len(a), -1), dist - 2 * r, d / dist[:, None]))
    if walls is not None and len(walls) and len(ids):
        dist, closest = point_segment_distance(pos[ids], walls)
        ii, kk = np.nonzero(dist - r <= eps_act)
        if len(ii):
            dd = dist[ii, kk]
            if np.any(dd == 0):
                raise InvalidConfiguration(f"center of disk {ids[ii[0]]} lies on a wall")
            e = (closest[ii, kk] - pos[ids[ii]]) / dd[:, None]
            parts.append(ActiveSet(ids[ii], np.full(len(ii), -1), kk, dd - r, e))
    if not parts:
        return ActiveSet.empty()
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    return out


@dataclass
class SaddleSolution:
    positions: np.ndarray
    multipliers: np.ndarray
    active: ActiveSet
    iterations: int = 0
    primal_residual: float = 0.0
    complementarity: float = 0.0
    linearized_gaps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stationarity: float = 0.0

    @property
    def kkt_residual(self) -> float:
        return max(self.primal_residual, self.complementarity, self.stationarity)


def kkt_certificate(sol: SaddleSolution, tol: float) -> bool:
    lam, g = sol.multipliers, sol.linearized_gaps
    if len(lam) == 0:
        return True
    return bool(
        lam.min() >= 0 and g.min() >= -tol and np.abs(np.minimum(lam, g)).max() <= tol and sol.stationarity <= tol
    )

@numba.njit(cache=True)
def _bt(ii, jj, e, lam, n):
    out = np.zeros((n, 2))
    for k in range(len(lam)):
        l = lam[k]
        out[ii[k], 0] -= l * e[k, 0]
        out[ii[k], 1] -= l * e[k, 1]
        if jj[k] >= 0:
            out[jj[k], 0] += l * e[k, 0]
            out[jj[k], 1] += l * e[k, 1]
    return out


@numba.njit(cache=True)
def _gaps(ii, jj, e, c0, lam, n):
    dq = _bt(ii, jj, e, lam, n)
    g = c0.copy()
    for k in range(len(lam)):
        v = -(e[k, 0] * dq[ii[k], 0] + e[k, 1] * dq[ii[k], 1])
        if jj[k] >= 0:
            v += e[k, 0] * dq[jj[k], 0] + e[k, 1] * dq[jj[k], 1]
        g[k] += v
    return g


@numba.njit(cache=True)
def _residual(lam, g):
    res = 0.0
    for k in range(len(lam)):
        v = abs(min(lam[k], g[k]))
        if v > res:
            res = v
    return res


@numba.njit(cache=True)
def _uzawa_loop(ii, jj, e, c0, lam, y, t, n, sigma, tol, max_iter, accelerate):
    # (y, t) is the momentum state, so that chunked calls continue one run
    g = _gaps(ii, jj, e, c0, lam, n)
    res = _residual(lam, g)
    it = 0
    if res <= tol:
        return lam, y, t, g, res, it, True
    gy = _gaps(ii, jj, e, c0, y, n)
    K = len(lam)
    while it < max_iter:
        it += 1
        lam_new = np.maximum(0.0, y - sigma * gy)
        if accelerate:
            dot = 0.0
            for k in range(K):
                dot += gy[k] * (lam_new[k] - lam[k])
            if dot > 0:
                t = 1.0
                y = lam_new.copy()
            else:
                t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
                y = lam_new + ((t - 1.0) / t_new) * (lam_new - lam)
                t = t_new
        else:
            y = lam_new.copy()
        lam = lam_new
        g = _gaps(ii, jj, e, c0, lam, n)
        res = _residual(lam, g)
        if res <= tol:
            return lam, y, t, g, res, it, True
        gy = _gaps(ii, jj, e, c0, y, n)
    return lam, y, t, g, res, it, False


def _support_matrix(active: ActiveSet, A: np.ndarray, n: int):
    e = active.e[A]
    rows = np.repeat(np.arange(len(A)), 2)
    ci = np.column_stack([2 * active.i[A], 2 * active.i[A] + 1]).ravel()
    pair = active.j[A] >= 0
    rj = np.repeat(np.flatnonzero(pair), 2)
    cj = np.column_stack([2 * active.j[A][pair], 2 * active.j[A][pair] + 1]).ravel()
    vals = np.concatenate([(-e).ravel(), e[pair].ravel()])
    return sparse.csr_matrix((vals, (np.concatenate([rows, rj]), np.concatenate([ci, cj]))), shape=(len(A), 2 * n))


def _least_distance(active: ActiveSet, c0: np.ndarray, n: int, tol: float):
    """Exact solution of ``min |dq|^2 s.t. c0 + B dq >= 0`` by reduction to nonnegative least squares.

    With ``E = [B^T; -c0^T]`` and ``f = (0, ..., 0, 1)``, the NNLS solution u
    gives ``lam = u / (1 + c0 . u)`` and ``dq = B^T lam``. Finite (active-set)
    and dense, so it serves as the fallback when the ascent stalls.
    Returns ``(dq, lam, g, stationarity)`` or None.
    """
    K = len(c0)
    B = _support_matrix(active, np.arange(K), n)
    E = np.vstack([B.T.toarray(), -c0[None, :]])
    f = np.zeros(2 * n + 1)
    f[-1] = 1.0
    try:
        u, _ = nnls(E, f, maxiter=50 * K + 100)
    except RuntimeError:
        return None
    den = 1.0 + float(c0 @ u)
    if not den > 0:
        return None
    lam = u / den
    dq = B.T @ lam
    g = c0 + B @ dq
    if g.min() < -tol or _residual(lam, g) > tol:
        return None
    dq = dq.reshape(n, 2)
    stat = float(np.abs(dq - active.apply_transpose(lam, n)).max())
    return dq, lam, g, stat


def project_step_uzawa(
    q_n: Configuration,
    q_pred: np.ndarray,
    active: ActiveSet,
    tol: float | None = None,
    max_iter: int | None = None,
    warm_start: np.ndarray | None = None,
    accelerate: bool = True,
    fallback_after: int | None = None,
) -> SaddleSolution:
    """Project ``q_pred`` onto the constraints of ``active`` linearized at ``q_n``.

    Dual ascent on the multipliers, ``lam <- max(0, lam - sigma g(q(lam)))``
    with ``q(lam) = q_pred + B^T lam`` and ``sigma = 1 / ||B B^T||_1``.
    With ``accelerate`` the ascent uses Nesterov momentum with gradient
    restart, which leaves fixed points unchanged but cuts the iteration count
    in jams by orders of magnitude. Stops once ``max |min(lam, g)| <= tol``.

    The ascent pins the primal point only to about the square root of
    machine precision times the objective scale, and crawls on badly
    conditioned contact networks (nearly aligned chains in a jam). After
    ``fallback_after`` iterations without convergence (default
    ``10 K + 2000``) the projection is solved exactly as a least-distance
    problem through NNLS and kept if it passes the KKT test;
    ``fallback_after = 0`` disables this.
    """
    n = len(q_n)
    q_pred = np.asarray(q_pred, dtype=float).reshape(n, 2)
    K = len(active)
    tol = 1e-9 * q_n.radius if tol is None else tol
    if K == 0:
        return SaddleSolution(q_pred.copy(), np.zeros(0), active)
    max_iter = 100 * K + 10000 if max_iter is None else max_iter
    fallback_after = 10 * K + 2000 if fallback_after is None else fallback_after
    c0 = active.gap + active.apply(q_pred - q_n.positions)
    lam = np.zeros(K) if warm_start is None else np.maximum(np.asarray(warm_start, dtype=float), 0.0)

    sigma = 1.0 / active.lipschitz_bound(n)
    e = np.ascontiguousarray(active.e)
    it = 0
    dq = None
    stationarity = 0.0
    y, t = lam.copy(), 1.0
    tried_exact = False
    while True:
        chunk = max_iter - it
        if fallback_after and not tried_exact:
            chunk = min(chunk, max(fallback_after - it, 0))
        lam, y, t, g, res, k, ok = _uzawa_loop(active.i, active.j, e, c0, lam, y, t, n, sigma, tol, chunk, accelerate)
        it += k
        if ok:
            break
        if fallback_after and not tried_exact:
            tried_exact = True
            ex = _least_distance(active, c0, n, tol)
            if ex is not None:
                dq, lam, g, stationarity = ex
                res = _residual(lam, g)
                break
        if it >= max_iter:
            raise UzawaError(
                f"Uzawa did not converge in {max_iter} iterations (residual {res:.3e}, tol {tol:.3e})",
                it,
                res,
                float(max(0.0, -g.min())),
            )
    q_new = q_pred + (active.apply_transpose(lam, n) if dq is None else dq)
    return SaddleSolution(
        q_new,
        lam,
        active,
        iterations=it,
        primal_residual=float(max(0.0, -g.min())),
        complementarity=res,
        linearized_gaps=g,
        stationarity=stationarity,
    )


def pressures(solution: SaddleSolution, tau: float) -> list[tuple[tuple[int, int, int], float]]:
    """Contact pressures ``lambda / tau`` keyed by ``(i, j, wall)``; gradients keep ``|G| = sqrt 2`` for pairs."""
    return [(k, float(l) / tau) for k, l in zip(solution.active.keys(), solution.multipliers)]


def prox_regularity_bound(N: int, r: float) -> float:
    if N < 2:
        raise ValueError("the bound needs at least two disks")
    if not r > 0:
        raise ValueError("radius must be positive")
    return r * math.sqrt(12.0 / (N * (N - 1) * (N + 1)))


@dataclass
class MicroParams:
    tol_geom: float | None = None  # default 1e-9 r
    tol_kkt: float | None = None  # default 1e-9 r
    max_iter: int | None = None  # default 100 K + 10000
    eps_act: float | None = None  # default 2 tau |U|_inf + tol_geom
    accelerate: bool = True
    fallback_after: int | None = None
    warm_start: bool = True
    max_rounds: int = 8


@dataclass
class MicroState:
    config: Configuration
    time: float = 0.0
    step: int = 0
    speeds: np.ndarray | None = None  # actual speeds over the previous step
    multipliers: dict = field(default_factory=dict)

    def copy(self) -> "MicroState":
        return MicroState(
            self.config.copy(),
            self.time,
            self.step,
            None if self.speeds is None else self.speeds.copy(),
            dict(self.multipliers),
        )


@dataclass
class StepReport:
    solution: SaddleSolution
    newly_exited: np.ndarray
    eps_act: float
    rounds: int


def _sub_active(active: ActiveSet, mask: np.ndarray) -> ActiveSet:
    return ActiveSet(active.i[mask], active.j[mask], active.wall[mask], active.gap[mask], active.e[mask])


def step_micro(
    state: MicroState,
    tau: float,
    desired: np.ndarray,
    walls: np.ndarray | None = None,
    exits: np.ndarray | None = None,
    params: MicroParams | None = None,
) -> tuple[MicroState, StepReport]:
    """One prediction-correction step; exited disks keep their last position and drop out."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    params = params or MicroParams()
    cfg = state.config
    r = cfg.radius
    tol_geom = 1e-9 * r if params.tol_geom is None else params.tol_geom
    tol_kkt = 1e-9 * r if params.tol_kkt is None else params.tol_kkt
    desired = np.asarray(desired, dtype=float).reshape(len(cfg), 2).copy()
    desired[cfg.exited] = 0.0
    umax = float(np.hypot(desired[:, 0], desired[:, 1]).max()) if len(cfg) else 0.0
    eps_act = 2 * tau * umax + tol_geom if params.eps_act is None else params.eps_act

    n_act = len(cfg.active)
    if n_act >= 2 and tau * umax > prox_regularity_bound(n_act, r):
        log.debug("tau*|U| = %.3g exceeds the prox-regularity bound %.3g", tau * umax, prox_regularity_bound(n_act, r))

    q_pred = cfg.positions + tau * desired
    active = active_constraints(cfg, eps_act, walls)
    warm = None
    if params.warm_start and len(active) and state.multipliers:
        warm = np.array([state.multipliers.get(k, 0.0) for k in active.keys()])
    sol = project_step_uzawa(cfg, q_pred, active, tol_kkt, params.max_iter, warm, params.accelerate, params.fallback_after)

    rounds = 1
    while True:
        # contacts missed by the activation radius: add them and project again
        trial = Configuration(sol.positions, r, cfg.exited)
        extra = active_constraints(trial, 0.0, walls)
        if len(extra):
            known = set(active.keys())
            missing = np.array([k not in known for k in extra.keys()])
            bad = missing & (extra.gap < -tol_geom)
        else:
            bad = np.zeros(0, dtype=bool)
        if not bad.any():
            break
        if rounds >= params.max_rounds:
            raise UzawaError("overlaps persist after re-projection", sol.iterations, sol.kkt_residual, float(-extra.gap.min()))
        add = _sub_active(extra, bad)
        relin = [
            gap_and_gradient(cfg, int(a), int(b)) if b >= 0 else wall_gap_and_gradient(cfg, int(a), walls[w], int(w))
            for a, b, w in zip(add.i, add.j, add.wall)
        ]
        active = active.concat(ActiveSet.from_constraints(relin))
        warm = np.concatenate([sol.multipliers, np.zeros(len(relin))])
        sol = project_step_uzawa(cfg, q_pred, active, tol_kkt, params.max_iter, warm, params.accelerate, params.fallback_after)
        rounds += 1

    new_pos = sol.positions
    exited = cfg.exited.copy()
    newly = np.zeros(len(cfg), dtype=bool)
    if exits is not None and len(exits):
        for seg in exits:
            newly |= segments_cross(cfg.positions, new_pos, seg) & ~cfg.exited
        exited |= newly
    speeds = np.hypot(*(new_pos - cfg.positions).T) / tau
    speeds[cfg.exited] = 0.0
    mult = {k: float(l) for k, l in zip(sol.active.keys(), sol.multipliers) if l > 0}
    new_state = MicroState(Configuration(new_pos, r, exited), state.time + tau, state.step + 1, speeds, mult)
    return new_state, StepReport(sol, np.flatnonzero(newly), eps_act, rounds)


def min_gap(q: Configuration, walls: np.ndarray | None = None) -> float:
    """Smallest disk-disk or disk-wall gap among active disks; pairs farther than 2r apart are ignored (inf if none)."""
    ids = q.active
    best = math.inf
    if len(ids) > 1:
        pos = q.positions[ids]
        a, b = close_pairs(pos, 4 * q.radius)
        if len(a):
            d = np.hypot(*(pos[b] - pos[a]).T) - 2 * q.radius
            best = min(best, float(d.min()))
    if walls is not None and len(walls) and len(ids):
        dist, _ = point_segment_distance(q.positions[ids], walls)
        best = min(best, float(dist.min() - q.radius))
    return best
