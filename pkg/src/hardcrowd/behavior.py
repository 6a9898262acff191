"""Behavioral layer: desired velocities from fields plus simple local strategies."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .geometry import VelocityField, sample_velocities
from .micro import Configuration, InvalidConfiguration, close_pairs

STRATEGIES = ("none", "decelerate", "bypass")


@dataclass
class BehaviorParams:
    l_prox: float = 0.5
    alpha: float = math.pi / 3  # half angle of view
    strategy: str = "none"
    field: str = "default"

    def __post_init__(self):
        if self.l_prox < 0:
            raise ValueError("l_prox must be non-negative")
        if not 0 < self.alpha < math.pi:
            raise ValueError("alpha must lie in (0, pi)")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")


def _unit(d) -> np.ndarray | None:
    d = np.asarray(d, dtype=float)
    n = math.hypot(d[0], d[1])
    return None if n == 0 else d / n


def neighbor_set(q: Configuration, i: int, d_i, params: BehaviorParams) -> np.ndarray:
    """Indices j != i that are near (``|q_i - q_j| < 2r + l_prox``) and in the view cone of ``d_i``."""
    d = _unit(d_i)
    if d is None or q.exited[i]:
        return np.zeros(0, dtype=np.int64)
    ids = q.active
    ids = ids[ids != i]
    v = q.positions[ids] - q.positions[i]
    dist = np.hypot(v[:, 0], v[:, 1])
    near = dist < 2 * q.radius + params.l_prox
    with np.errstate(invalid="ignore", divide="ignore"):
        cosang = (v @ d) / dist
    visible = cosang >= math.cos(params.alpha)
    return ids[near & visible & (dist > 0)]


def _weights(q: Configuration, i: int, nbrs: np.ndarray, d: np.ndarray, params: BehaviorParams) -> np.ndarray:
    v = q.positions[nbrs] - q.positions[i]
    dist = np.hypot(v[:, 0], v[:, 1])
    ca = math.cos(params.alpha)
    ang = ((v @ d) / dist - ca) / (1 - ca)
    if params.l_prox > 0:
        prox = 1 - np.clip(dist - 2 * q.radius, 0.0, None) / params.l_prox
    else:
        prox = np.ones_like(dist)
    return np.clip(ang, 0.0, 1.0) * np.clip(prox, 0.0, 1.0)


def decelerate(
    q: Configuration,
    i: int,
    nbrs: np.ndarray,
    d_i,
    desired_speed: float,
    previous_speeds: np.ndarray,
    params: BehaviorParams,
) -> float:
    """Slow down to the weighted barycenter of the neighbors' previous speeds when it is lower."""
    d = _unit(d_i)
    if d is None or len(nbrs) == 0:
        return float(desired_speed)
    w = _weights(q, i, np.asarray(nbrs), d, params)
    if w.sum() <= 0:
        return float(desired_speed)
    bary = float(np.dot(w, previous_speeds[nbrs]) / w.sum())
    if bary < desired_speed:
        return float(min(max(bary, 0.0), desired_speed))
    return float(desired_speed)


def bypass(q: Configuration, i: int, nbrs: np.ndarray, d_i, params: BehaviorParams, tol: float | None = None) -> np.ndarray:
    """Rotate ``d_i`` to the unobstructed direction closest to it (left wins ties).

    A direction is obstructed by neighbor ``j`` when moving along it would
    bring the two disks into contact, i.e. it lies strictly inside the cone of
    half-angle ``asin(2r / |q_j - q_i|)`` around ``q_j - q_i``. Candidates are
    ``d_i`` itself and the tangent directions of every neighbor. When all are
    obstructed the direction is kept. The norm of ``d_i`` is preserved.
    """
    d_i = np.asarray(d_i, dtype=float)
    speed = math.hypot(d_i[0], d_i[1])
    if speed == 0 or len(nbrs) == 0:
        return d_i.copy()
    r = q.radius
    tol = 1e-9 * r if tol is None else tol
    nbrs = np.asarray(nbrs)
    v = q.positions[nbrs] - q.positions[i]
    dist = np.hypot(v[:, 0], v[:, 1])
    if np.any(dist < 2 * r - tol):
        k = int(np.argmin(dist))
        raise InvalidConfiguration(f"disk {i} overlaps neighbor {nbrs[k]}")
    phi0 = math.atan2(d_i[1], d_i[0])
    theta = np.arctan2(v[:, 1], v[:, 0]) - phi0
    theta = (theta + np.pi) % (2 * np.pi) - np.pi
    beta = np.arcsin(np.minimum(1.0, 2 * r / dist))

    def blocked(off: float) -> bool:
        diff = np.abs((off - theta + np.pi) % (2 * np.pi) - np.pi)
        return bool(np.any(diff < beta - 1e-12))

    cands = np.concatenate([[0.0], theta + beta, theta - beta])
    cands = (cands + np.pi) % (2 * np.pi) - np.pi
    # smallest deviation first; at equal deviation the left (positive) turn first
    order = np.lexsort((-cands, np.round(np.abs(cands), 12)))
    for k in order:
        off = float(cands[k])
        if not blocked(off):
            phi = phi0 + off
            return speed * np.array([math.cos(phi), math.sin(phi)])
    return d_i.copy()


def assign_desired(
    q: Configuration,
    fields: Mapping[str, VelocityField],
    params: Mapping[str, BehaviorParams] | BehaviorParams,
    types=None,
    previous_speeds: np.ndarray | None = None,
) -> np.ndarray:
    """Per-disk desired velocities: sample each disk's field, then apply its strategy.

    ``types`` holds one key of ``params`` per disk (ignored when a single
    ``BehaviorParams`` is given). Disks with a zero desired velocity, and
    exited disks, get zero. ``previous_speeds`` defaults to the sampled
    desired speeds, which makes the first step strategy-neutral for
    deceleration.
    """
    n = len(q)
    if isinstance(params, BehaviorParams):
        types = np.zeros(n, dtype=object)
        params = {0: params}
    elif types is None:
        raise ValueError("types are required when several behavior parameter sets are given")
    types = np.asarray(types, dtype=object)
    if len(types) != n:
        raise ValueError("one type per disk is required")
    base = np.zeros((n, 2))
    for t in set(types.tolist()):
        if t not in params:
            raise KeyError(f"no behavior parameters for type {t!r}")
        fid = params[t].field
        if fid not in fields:
            raise KeyError(f"no velocity field {fid!r} for type {t!r}")
        sel = np.flatnonzero(types == t)
        base[sel] = sample_velocities(fields[fid], q.positions[sel])
    base[q.exited] = 0.0
    speed = np.hypot(base[:, 0], base[:, 1])
    prev = speed if previous_speeds is None else np.asarray(previous_speeds, dtype=float)
    out = base.copy()
    strategies = {params[t].strategy for t in set(types.tolist())}
    if strategies == {"none"}:
        return out
    ids = q.active
    lmax = max(p.l_prox for p in params.values())
    la, lb = close_pairs(q.positions[ids], 2 * q.radius + lmax)
    cand: dict[int, list[int]] = {}
    for a, b in zip(ids[la].tolist(), ids[lb].tolist()):
        cand.setdefault(a, []).append(b)
        cand.setdefault(b, []).append(a)
    cos_cache = {}
    for i in ids.tolist():
        p = params[types[i]]
        if p.strategy == "none" or speed[i] == 0 or i not in cand:
            continue
        d = base[i] / speed[i]
        js = np.asarray(cand[i])
        v = q.positions[js] - q.positions[i]
        dist = np.hypot(v[:, 0], v[:, 1])
        ca = cos_cache.setdefault(p.alpha, math.cos(p.alpha))
        keep = (dist < 2 * q.radius + p.l_prox) & (dist > 0) & ((v @ d) >= ca * dist)
        nbrs = js[keep]
        if len(nbrs) == 0:
            continue
        if p.strategy == "decelerate":
            out[i] = d * decelerate(q, i, nbrs, d, speed[i], prev, p)
        elif float(np.dot(base[i], base[i])) > 0 and prev[nbrs].mean() < speed[i]:
            out[i] = bypass(q, i, nbrs, base[i], p)
    return out
