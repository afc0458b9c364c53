"""Voxel traversal: exact center-to-center visibility and first-hit ray casting.

Both traversals step every tied axis at once when a ray crosses an edge or a
corner exactly, so voxels that the ray only touches on a set of measure zero
are never visited.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


def _check_inside(point, dims, what: str) -> None:
    if any(not (0 <= p < d) for p, d in zip(point, dims)):
        raise ContractError(f"{what} {tuple(point)} lies outside grid {tuple(dims)}")


def visibility_from(occupied: np.ndarray, ego) -> np.ndarray:
    """Voxels whose center is reachable from the ego center without passing an occupied voxel.

    The march is done in exact integer arithmetic: the ray to a target with
    index offset ``d`` crosses its k-th boundary along axis ``i`` at
    ``t = (2k + 1) / (2|d_i|)``. Neither the ego voxel nor the target voxel
    occludes the target.
    """
    occupied = np.asarray(occupied, dtype=bool)
    dims = occupied.shape
    ego = tuple(int(e) for e in ego)
    _check_inside(ego, dims, "ego")

    targets = np.indices(dims).reshape(3, -1).T
    d = targets - np.asarray(ego)
    mag = np.abs(d)
    step = np.sign(d)
    safe = np.where(mag == 0, 1, mag)
    # common denominator: crossing k on axis i sits at (2k+1) * Q / (2|d_i|)
    Q = 2 * safe.prod(axis=1)
    unit = Q[:, None] // (2 * safe)

    cur = np.tile(np.asarray(ego), (targets.shape[0], 1))
    crossed = np.zeros_like(mag)
    blocked = np.zeros(targets.shape[0], dtype=bool)
    active = mag.sum(axis=1) > 0
    big = np.iinfo(np.int64).max
    while active.any():
        nxt = np.where(crossed < mag, (2 * crossed + 1) * unit, big)
        tmin = nxt.min(axis=1)
        move = (nxt == tmin[:, None]) & active[:, None]
        cur = cur + move * step
        crossed = crossed + move
        arrived = (crossed == mag).all(axis=1)
        idx = np.nonzero(active & ~arrived)[0]
        hit = occupied[cur[idx, 0], cur[idx, 1], cur[idx, 2]]
        blocked[idx[hit]] = True
        active = active & ~arrived & ~blocked
    return (~blocked).reshape(dims)


def raycast_visibility(labels: np.ndarray, ego, free_class: int = 0) -> np.ndarray:
    return visibility_from(np.asarray(labels) != free_class, ego)


@dataclass(frozen=True)
class RayHit:
    hit: bool
    class_id: int
    distance_m: float


def first_hits(
    labels: np.ndarray,
    origin,
    dirs: np.ndarray,
    voxel_size_m: float,
    free_class: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized DDA for many rays from one origin (in voxel-index coordinates).

    Returns ``(hit, class_id, distance_m, voxel)``; ``class_id`` is -1 and
    ``distance_m`` is inf for rays that leave the grid without hitting.
    Distances are measured to the hit voxel's center.
    """
    labels = np.asarray(labels)
    dims = np.asarray(labels.shape)
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    _check_inside(origin, labels.shape, "origin")
    n = dirs.shape[0]

    cur = np.tile(np.floor(origin).astype(np.int64), (n, 1))
    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = np.where(step > 0, cur + 1.0, cur.astype(np.float64))
        t_max = np.where(step != 0, (boundary - origin) / dirs, np.inf)
        t_delta = np.where(step != 0, 1.0 / np.abs(dirs), np.inf)

    hit = np.zeros(n, dtype=bool)
    voxel = np.full((n, 3), -1, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    while active.any():
        idx = np.nonzero(active)[0]
        c = cur[idx]
        occ = labels[c[:, 0], c[:, 1], c[:, 2]] != free_class
        hit[idx[occ]] = True
        voxel[idx[occ]] = c[occ]
        active[idx[occ]] = False

        idx = idx[~occ]
        tm = t_max[idx]
        tmin = tm.min(axis=1)
        move = tm == tmin[:, None]
        cur[idx] += move * step[idx]
        t_max[idx] = np.where(move, tm + t_delta[idx], tm)
        inside = ((cur[idx] >= 0) & (cur[idx] < dims)).all(axis=1)
        active[idx[~inside]] = False

    class_id = np.full(n, -1, dtype=np.int64)
    distance = np.full(n, np.inf)
    if hit.any():
        v = voxel[hit]
        class_id[hit] = labels[v[:, 0], v[:, 1], v[:, 2]]
        distance[hit] = voxel_size_m * np.linalg.norm(v + 0.5 - origin, axis=1)
    return hit, class_id, distance, voxel


def dda_first_hit(labels, origin, direction, voxel_size_m: float, free_class: int = 0) -> RayHit:
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    if norm == 0:
        raise ContractError("dda_first_hit: zero direction")
    if abs(norm - 1.0) > 1e-9:
        raise ContractError(f"dda_first_hit: direction must be unit length, |dir| = {norm}")
    hit, cls, dist, _ = first_hits(labels, origin, direction[None], voxel_size_m, free_class)
    return RayHit(bool(hit[0]), int(cls[0]), float(dist[0]))
