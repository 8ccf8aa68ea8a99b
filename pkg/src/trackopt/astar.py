"""Spatiotemporal A* tracking baseline.

States are (voxel, frame) pairs, and time advances by exactly one frame per
edge. A move goes to one of the 27 neighbouring voxels (hover included),
limited by the speed cap. Voxels closer than the hard margin to any obstacle
are excluded. The edge cost into (v, t) is

    step length + lam_vis * (1 - visibility of the target at t)
                + lam_track * (distance to target at t - d_opt) ** 2

Heuristics
----------
``"viewpoint"`` (default)
    Straight-line distance to the ideal viewpoint of the final frame. The
    search has no terminal position constraint, so this can overestimate and
    is *not* admissible. It is cheap and keeps the search narrow.
``"admissible"``
    A bound on the remaining tracking cost: the distance to the target can
    change per frame by at most one voxel diagonal plus the target's own
    step. Returned costs are optimal.
``"zero"``
    Plain Dijkstra over the same graph.
"""
from __future__ import annotations

import heapq
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from .costs import CostConfig, CostModel, build_context
from .geom import Bvh, min_distance_kernel, visible_count_kernel
from .optimizer import DroneTrajectory, _bvh_of, best_fan_viewpoint, derive_poses

HEURISTICS = {"viewpoint": 0, "admissible": 1, "zero": 2}
TRACK_FORMS = {"squared": 0, "relative": 1}


@dataclass
class AstarParams:
    voxel: float = 2.0
    v_max: float = 15.0
    lam_vis: float = 3.0
    lam_track: float = 1.0
    hard_margin: float = 2.0
    d_opt: float = 28.0
    heuristic: str = "viewpoint"
    track_form: str = "squared"  # or "relative": |dist - d_opt| / d_opt
    xy_pad: float = 45.0  # grid extends this far beyond the target path
    z_max: float = 60.0  # grid ceiling above ground
    max_expansions: int = 5_000_000

    def __post_init__(self):
        if self.voxel <= 0 or self.v_max <= 0 or self.hard_margin <= 0:
            raise ValueError("voxel, v_max and hard_margin must be positive")
        if self.track_form not in TRACK_FORMS:
            raise ValueError(f"track_form must be one of {sorted(TRACK_FORMS)}")
        if self.heuristic not in HEURISTICS:
            raise ValueError(f"heuristic must be one of {sorted(HEURISTICS)}")


@dataclass
class AstarStats:
    expansions: int = 0
    open_peak: int = 0
    wall_ms: float = 0.0
    cost: float = 0.0
    found: bool = False
    grid: tuple = ()

    def to_dict(self) -> dict:
        return asdict(self)


class NoPathError(RuntimeError):
    pass


@dataclass
class VoxelGrid:
    origin: np.ndarray  # corner of voxel (0, 0, 0)
    voxel: float
    dims: tuple  # (nx, ny, nz)

    @property
    def n(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def center(self, ix, iy, iz) -> np.ndarray:
        return self.origin + (np.array([ix, iy, iz], dtype=float) + 0.5) * self.voxel

    def index_of(self, p) -> tuple[int, int, int]:
        q = np.floor((np.asarray(p, float) - self.origin) / self.voxel).astype(int)
        q = np.clip(q, 0, np.array(self.dims) - 1)
        return int(q[0]), int(q[1]), int(q[2])

    def flat(self, ix, iy, iz) -> int:
        return (ix * self.dims[1] + iy) * self.dims[2] + iz


def grid_for_path(points, params: AstarParams, ground: float = 0.0) -> VoxelGrid:
    lo = points.min(axis=0) - params.xy_pad
    hi = points.max(axis=0) + params.xy_pad
    lo[2] = ground
    hi[2] = ground + params.z_max
    dims = tuple(int(x) for x in np.maximum(np.ceil((hi - lo) / params.voxel), 1))
    return VoxelGrid(lo, float(params.voxel), dims)


# ---------------------------------------------------------------------------
# search kernel
# ---------------------------------------------------------------------------


@njit(cache=True)
def _clear(idx, clear, v, x0, x1, x2, margin):
    c = clear[v]
    if c < 0:
        d = min_distance_kernel(idx, x0, x1, x2, margin)
        c = 1 if d >= margin else 0
        clear[v] = c
    return c == 1


@njit(cache=True)
def _heur(mode, x0, x1, x2, t, goal, target, reach, lam_track, d_opt):
    if mode == 2:
        return 0.0
    if mode == 0:
        return math.sqrt((x0 - goal[0]) ** 2 + (x1 - goal[1]) ** 2 + (x2 - goal[2]) ** 2)
    # admissible: sum over later frames of the smallest tracking error still forced
    n = target.shape[0]
    r = math.sqrt((x0 - target[t, 0]) ** 2 + (x1 - target[t, 1]) ** 2 + (x2 - target[t, 2]) ** 2)
    e = abs(r - d_opt)
    h = 0.0
    for k in range(t + 1, n):
        slack = e - (reach[k] - reach[t])
        if slack <= 0.0:
            break
        h += lam_track * slack * slack
    return h


@njit(cache=True)
def edge_cost_kernel(idx, x0, x1, x2, step, t, target, heights, lam_vis, lam_track, d_opt, form):
    p0 = target[t, 0]
    p1 = target[t, 1]
    p2 = target[t, 2]
    vis = visible_count_kernel(idx, x0, x1, x2, p0, p1, p2, heights) / heights.shape[0]
    r = math.sqrt((x0 - p0) ** 2 + (x1 - p1) ** 2 + (x2 - p2) ** 2)
    if form == 1:
        return step + lam_vis * (1.0 - vis) + lam_track * abs(r - d_opt) / d_opt
    return step + lam_vis * (1.0 - vis) + lam_track * (r - d_opt) ** 2


_EMPTY = -1
_HASH = 0x9E3779B97F4A7C15 - (1 << 64)  # golden-ratio multiplier as int64


@njit(cache=True)
def _slot(keys, key):
    """Open-addressing probe: slot holding ``key`` or the empty slot where it goes."""
    mask = keys.shape[0] - 1
    h = ((key * _HASH) >> 17) & mask
    while keys[h] != _EMPTY and keys[h] != key:
        h = (h + 1) & mask
    return h


@njit(cache=True)
def _grow(keys, g, parent, edge, closed):
    cap = keys.shape[0] * 2
    k2 = np.full(cap, _EMPTY, np.int64)
    g2 = np.empty(cap, np.float64)
    p2 = np.empty(cap, np.int64)
    e2 = np.empty(cap, np.float64)
    c2 = np.zeros(cap, np.bool_)
    for i in range(keys.shape[0]):
        if keys[i] != _EMPTY:
            j = _slot(k2, keys[i])
            k2[j] = keys[i]
            g2[j] = g[i]
            p2[j] = parent[i]
            e2[j] = edge[i]
            c2[j] = closed[i]
    return k2, g2, p2, e2, c2


@njit(cache=True)
def astar_kernel(idx, origin, voxel, nx, ny, nz, start_v, target, heights, moves, move_len,
                 lam_vis, lam_track, d_opt, form, margin, mode, goal, reach, max_exp):
    n = target.shape[0]
    nv = nx * ny * nz
    clear = np.full(nv, -1, np.int8)
    # per-state table: g, parent, state cost without the step, closed flag
    cap = 1 << 16
    keys = np.full(cap, _EMPTY, np.int64)
    g = np.empty(cap, np.float64)
    parent = np.empty(cap, np.int64)
    edge = np.empty(cap, np.float64)
    closed = np.zeros(cap, np.bool_)
    used = 0
    sx = start_v // (ny * nz)
    sy = (start_v // nz) % ny
    sz = start_v % nz
    x0 = origin[0] + (sx + 0.5) * voxel
    x1 = origin[1] + (sy + 0.5) * voxel
    x2 = origin[2] + (sz + 0.5) * voxel
    start = start_v  # t = 0
    h0 = _slot(keys, start)
    keys[h0] = start
    g[h0] = 0.0
    parent[h0] = -1
    edge[h0] = 0.0
    used += 1
    heap = [(_heur(mode, x0, x1, x2, 0, goal, target, reach, lam_track, d_opt), 0, start)]
    expansions = 0
    peak = 1
    found = -1
    while len(heap) > 0:
        f, negt, key = heapq.heappop(heap)
        hk = _slot(keys, key)
        if closed[hk]:
            continue
        t = key // nv
        v = key - t * nv
        if t == n - 1:
            found = key
            break
        closed[hk] = True
        expansions += 1
        if expansions > max_exp:
            break
        gk = g[hk]
        ix = v // (ny * nz)
        iy = (v // nz) % ny
        iz = v % nz
        t1 = t + 1
        for m in range(moves.shape[0]):
            jx = ix + moves[m, 0]
            jy = iy + moves[m, 1]
            jz = iz + moves[m, 2]
            if jx < 0 or jy < 0 or jz < 0 or jx >= nx or jy >= ny or jz >= nz:
                continue
            w = (jx * ny + jy) * nz + jz
            y0 = origin[0] + (jx + 0.5) * voxel
            y1 = origin[1] + (jy + 0.5) * voxel
            y2 = origin[2] + (jz + 0.5) * voxel
            if not _clear(idx, clear, w, y0, y1, y2, margin):
                continue
            nk = t1 * nv + w
            if 2 * (used + 1) > keys.shape[0]:
                keys, g, parent, edge, closed = _grow(keys, g, parent, edge, closed)
            hn = _slot(keys, nk)
            if keys[hn] == _EMPTY:
                keys[hn] = nk
                g[hn] = np.inf
                parent[hn] = -1
                edge[hn] = edge_cost_kernel(idx, y0, y1, y2, 0.0, t1, target, heights, lam_vis, lam_track, d_opt, form)
                closed[hn] = False
                used += 1
            elif closed[hn]:
                continue
            c = gk + (move_len[m] + edge[hn])
            if c < g[hn]:
                g[hn] = c
                parent[hn] = key
                h = _heur(mode, y0, y1, y2, t1, goal, target, reach, lam_track, d_opt)
                heapq.heappush(heap, (c + h, -t1, nk))
        if len(heap) > peak:
            peak = len(heap)
    if found < 0:
        return np.empty(0, np.int64), np.inf, expansions, peak
    path = np.empty(n, np.int64)
    k = found
    for t in range(n - 1, -1, -1):
        path[t] = k - t * nv
        k = parent[_slot(keys, k)]
    return path, g[_slot(keys, found)], expansions, peak


def neighbor_moves(voxel: float, v_max: float, dt: float):
    """The 27 unit moves (hover included) whose length fits ``v_max * dt``."""
    mv = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.int64)
    ln = voxel * np.linalg.norm(mv, axis=1)
    keep = ln <= v_max * dt + 1e-12
    return mv[keep], ln[keep]


def _start_voxel(grid: VoxelGrid, bvh: Bvh, p, margin: float) -> int:
    """Voxel of ``p``, or the nearest clear voxel to it."""
    ix, iy, iz = grid.index_of(p)
    nx, ny, nz = grid.dims
    for r in range(0, max(grid.dims)):
        best = None
        for a in range(max(ix - r, 0), min(ix + r, nx - 1) + 1):
            for b in range(max(iy - r, 0), min(iy + r, ny - 1) + 1):
                for c in range(max(iz - r, 0), min(iz + r, nz - 1) + 1):
                    if max(abs(a - ix), abs(b - iy), abs(c - iz)) != r:
                        continue
                    x = grid.center(a, b, c)
                    if bvh.min_distance(x) >= margin:
                        d = float(np.linalg.norm(x - p))
                        if best is None or d < best[0]:
                            best = (d, grid.flat(a, b, c))
        if best is not None:
            return best[1]
    raise NoPathError("no clear voxel in the search grid")


def astar_plan(path, scene, params: AstarParams | None = None, cfg: CostConfig | None = None, grid: VoxelGrid | None = None):
    """Plan a tracking trajectory over the (voxel, frame) graph.

    Returns ``(DroneTrajectory, AstarStats)``. Raises :class:`NoPathError` when
    no state at the last frame is reachable.
    """
    t0 = time.perf_counter()
    params = AstarParams() if params is None else params
    cfg = CostConfig() if cfg is None else cfg
    bvh = _bvh_of(scene)
    pts = np.ascontiguousarray(np.asarray(getattr(path, "points", path), dtype=float).reshape(-1, 3))
    dt = float(getattr(path, "dt", 0.5))
    n = len(pts)
    ctx = build_context(pts)
    ground = float(getattr(scene, "ground_z", 0.0))
    grid = grid_for_path(pts, params, ground) if grid is None else grid
    model = CostModel(ctx, bvh, cfg)
    start = _start_voxel(grid, bvh, best_fan_viewpoint(model, 0), params.hard_margin)
    goal = best_fan_viewpoint(model, n - 1)
    moves, move_len = neighbor_moves(grid.voxel, params.v_max, dt)
    # admissible bound: radial distance changes per frame by <= diagonal + target step
    tstep = np.concatenate([[0.0], np.linalg.norm(np.diff(pts, axis=0), axis=1)])
    reach = np.cumsum(tstep + move_len.max())
    vpath, cost, exp, peak = astar_kernel(
        bvh.packed, grid.origin, grid.voxel, grid.dims[0], grid.dims[1], grid.dims[2], start, pts,
        ctx.body_heights, moves, move_len, params.lam_vis, params.lam_track, params.d_opt,
        TRACK_FORMS[params.track_form], params.hard_margin, HEURISTICS[params.heuristic], goal, reach, params.max_expansions,
    )
    stats = AstarStats(int(exp), int(peak), (time.perf_counter() - t0) * 1e3, float(cost), len(vpath) > 0, grid.dims)
    if len(vpath) == 0:
        raise NoPathError(f"no path found after {exp} expansions")
    nyz = grid.dims[1] * grid.dims[2]
    ijk = np.column_stack([vpath // nyz, (vpath // grid.dims[2]) % grid.dims[1], vpath % grid.dims[2]])
    W = grid.origin + (ijk + 0.5) * grid.voxel
    traj = DroneTrajectory(dt, W)
    traj.yaw, traj.pitch = derive_poses(traj, ctx)
    return traj, stats


def plan_cost(W, path, bvh: Bvh, params: AstarParams, heights=None) -> float:
    """Edge-cost sum of a voxel-center plan, for audits."""
    pts = np.asarray(getattr(path, "points", path), dtype=float)
    heights = build_context(pts).body_heights if heights is None else heights
    W = np.asarray(W, float)
    total = 0.0
    for t in range(1, len(W)):
        step = float(np.linalg.norm(W[t] - W[t - 1]))
        total += edge_cost_kernel(bvh.packed, W[t, 0], W[t, 1], W[t, 2], step, t, pts, heights,
                                  params.lam_vis, params.lam_track, params.d_opt, TRACK_FORMS[params.track_form])
    return total
