"""Ground-target paths: grid A*, Douglas-Peucker, centripetal Catmull-Rom,
curvature-dependent speeds with random stops, and fixed-dt resampling."""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import ObstacleScene, WalkableGrid, build_walkable_grid

SQRT2 = math.sqrt(2.0)


@dataclass(eq=False)
class TimedPath:
    """Target positions sampled every ``dt`` seconds."""

    dt: float
    points: np.ndarray
    seed: int | None = None
    stop_mask: np.ndarray | None = field(default=None, repr=False)
    source_cells: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)

    def __len__(self):
        return self.points.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    @property
    def speeds(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1) / self.dt

    def truncated(self, n: int) -> "TimedPath":
        mask = None if self.stop_mask is None else self.stop_mask[: max(n - 1, 0)]
        return TimedPath(self.dt, self.points[:n].copy(), self.seed, mask, self.source_cells)


@dataclass
class SpeedParams:
    v_cruise: float = 1.4
    v_min: float = 0.5
    v_max: float = 2.5
    alpha: float = 2.0
    beta: float = 0.15
    stop_prob: float = 0.05
    stop_duration_range: tuple[float, float] = (1.0, 5.0)
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.v_min <= self.v_cruise <= self.v_max):
            raise ValueError("need 0 < v_min <= v_cruise <= v_max")
        if not (0 <= self.beta < 1):
            raise ValueError("beta must lie in [0, 1)")


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

_MOVES = [(1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
          (1, 1, SQRT2), (1, -1, SQRT2), (-1, 1, SQRT2), (-1, -1, SQRT2)]


def grid_neighbors(occ, i, j):
    """8-connected walkable neighbors; a diagonal step needs both orthogonal
    cells free so paths never cut obstacle corners."""
    nx, ny = occ.shape
    for di, dj, c in _MOVES:
        a, b = i + di, j + dj
        if not (0 <= a < nx and 0 <= b < ny) or not occ[a, b]:
            continue
        if di and dj and not (occ[i + di, j] and occ[i, j + dj]):
            continue
        yield a, b, c


def plan_grid_path(grid: WalkableGrid, start, goal) -> list[tuple[int, int]]:
    """Shortest 8-connected cell path (diagonal cost sqrt(2)); [] if unreachable."""
    start, goal = tuple(map(int, start)), tuple(map(int, goal))
    if not grid.walkable(start):
        raise ValueError(f"start cell {start} is not walkable")
    if not grid.walkable(goal):
        raise ValueError(f"goal cell {goal} is not walkable")
    occ = grid.occupancy
    gi, gj = goal

    def h(i, j):
        dx, dy = abs(i - gi), abs(j - gj)
        return (dx + dy) + (SQRT2 - 2.0) * min(dx, dy)

    g = {start: 0.0}
    parent = {start: None}
    heap = [(h(*start), 0.0, start)]
    closed = set()
    while heap:
        _, gc, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            out = []
            while cur is not None:
                out.append(cur)
                cur = parent[cur]
            return out[::-1]
        closed.add(cur)
        for a, b, c in grid_neighbors(occ, *cur):
            ng = gc + c
            if ng < g.get((a, b), math.inf):
                g[(a, b)] = ng
                parent[(a, b)] = cur
                heapq.heappush(heap, (ng + h(a, b), ng, (a, b)))
    return []


def path_cost(cells) -> float:
    return float(sum(math.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(cells, cells[1:])))


# ---------------------------------------------------------------------------
# polyline processing
# ---------------------------------------------------------------------------


def point_segment_distance(p, a, b) -> float:
    ab = b - a
    den = ab @ ab
    if den == 0.0:
        return float(np.linalg.norm(p - a))
    t = min(max(((p - a) @ ab) / den, 0.0), 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def simplify_dp(path, epsilon: float) -> np.ndarray:
    """Douglas-Peucker simplification; endpoints are always kept.

    A point survives when its distance to the current chord is at least
    ``epsilon``, so ``epsilon=0`` returns the input unchanged.
    """
    pts = np.asarray(path, dtype=float)
    n = len(pts)
    if n < 3:
        return pts.copy()
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        s, e = stack.pop()
        if e - s < 2:
            continue
        d = [point_segment_distance(pts[k], pts[s], pts[e]) for k in range(s + 1, e)]
        k = int(np.argmax(d))
        if d[k] >= epsilon:
            m = s + 1 + k
            keep[m] = True
            stack.append((s, m))
            stack.append((m, e))
    return pts[keep]


def _knot(a, b, alpha=0.5):
    d = float(np.linalg.norm(b - a)) ** alpha
    return d


def smooth_catmull_rom(path, samples_per_segment: int = 8, alpha: float = 0.5) -> np.ndarray:
    """Centripetal Catmull-Rom spline through every control point.

    Endpoints are duplicated as phantom controls; a zero-length knot interval
    falls back to 1 so the evaluation stays defined. Each segment contributes
    ``samples_per_segment`` samples uniformly spaced in its parameter, and the
    final control point closes the curve.
    """
    pts = np.asarray(path, dtype=float)
    if len(pts) < 2:
        return pts.copy()
    if samples_per_segment < 1:
        raise ValueError("samples_per_segment must be >= 1")
    ctrl = np.vstack([pts[:1], pts, pts[-1:]])
    out = []
    u = np.arange(samples_per_segment) / samples_per_segment
    for s in range(len(pts) - 1):
        p0, p1, p2, p3 = ctrl[s], ctrl[s + 1], ctrl[s + 2], ctrl[s + 3]
        dts = [_knot(p0, p1, alpha), _knot(p1, p2, alpha), _knot(p2, p3, alpha)]
        dts = [d if d > 1e-12 else 1.0 for d in dts]
        t0, t1 = 0.0, dts[0]
        t2 = t1 + dts[1]
        t3 = t2 + dts[2]
        t = (t1 + u * (t2 - t1))[:, None]
        a1 = (t1 - t) / (t1 - t0) * p0 + (t - t0) / (t1 - t0) * p1
        a2 = (t2 - t) / (t2 - t1) * p1 + (t - t1) / (t2 - t1) * p2
        a3 = (t3 - t) / (t3 - t2) * p2 + (t - t2) / (t3 - t2) * p3
        b1 = (t2 - t) / (t2 - t0) * a1 + (t - t0) / (t2 - t0) * a2
        b2 = (t3 - t) / (t3 - t1) * a2 + (t - t1) / (t3 - t1) * a3
        c = (t2 - t) / (t2 - t1) * b1 + (t - t1) / (t2 - t1) * b2
        c[0] = p1  # exact interpolation at the knot
        out.append(c)
    out.append(pts[-1:])
    return np.vstack(out)


def menger_curvature(a, b, c) -> float:
    """Inverse circumradius of three points; 0 for collinear or repeated points."""
    a, b, c = (np.asarray(x, dtype=float) for x in (a, b, c))
    ab, bc, ca = np.linalg.norm(b - a), np.linalg.norm(c - b), np.linalg.norm(a - c)
    den = ab * bc * ca
    if den == 0.0:
        return 0.0
    area2 = np.linalg.norm(np.cross(b - a, c - a))  # twice the triangle area
    return float(2.0 * area2 / den)


def vertex_curvatures(path) -> np.ndarray:
    pts = np.asarray(path, dtype=float)
    k = np.zeros(len(pts))
    for i in range(1, len(pts) - 1):
        k[i] = menger_curvature(pts[i - 1], pts[i], pts[i + 1])
    return k


def speed_profile(path, params: SpeedParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """One speed per vertex: cruise speed slowed by curvature, jittered by
    seeded uniform noise, clipped to [v_min, v_max]. Endpoints use zero curvature."""
    rng = np.random.default_rng(params.seed) if rng is None else rng
    kappa = vertex_curvatures(path)
    noise = rng.uniform(-1.0, 1.0, size=len(kappa))
    v = params.v_cruise / (1.0 + params.alpha * kappa) * (1.0 + params.beta * noise)
    return np.clip(v, params.v_min, params.v_max)


def draw_stops(n_vertices: int, params: SpeedParams, rng: np.random.Generator, candidates=None) -> dict[int, float]:
    """Random dwell times keyed by vertex index (interior vertices only)."""
    idx = range(1, n_vertices - 1) if candidates is None else candidates
    stops = {}
    lo, hi = params.stop_duration_range
    for k in idx:
        if rng.random() < params.stop_prob:
            stops[int(k)] = float(rng.uniform(lo, hi))
    return stops


def vertex_times(path, speeds, stops=None) -> tuple[np.ndarray, np.ndarray]:
    """Arrival and departure time at each vertex (trapezoid rule on 1/v along arc)."""
    pts = np.asarray(path, dtype=float)
    v = np.asarray(speeds, dtype=float)
    if len(v) != len(pts):
        raise ValueError("need one speed per vertex")
    if np.any(v <= 0):
        raise ValueError("zero speed outside a stop interval")
    stops = stops or {}
    ds = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    seg_t = 0.5 * (1.0 / v[:-1] + 1.0 / v[1:]) * ds
    arrive = np.zeros(len(pts))
    depart = np.zeros(len(pts))
    for i in range(len(pts)):
        if i > 0:
            arrive[i] = depart[i - 1] + seg_t[i - 1]
        depart[i] = arrive[i] + stops.get(i, 0.0)
    return arrive, depart


def resample_fixed_dt(path, speeds, stops=None, dt: float = 0.5, seed: int | None = None) -> TimedPath:
    """Sample the timed polyline at t = 0, dt, 2 dt, ... up to the final arrival.

    Positions between vertex times are linearly interpolated; during a dwell
    the target holds its vertex. A dwell of ``d`` seconds therefore yields
    ``d / dt`` identical samples (one more when it starts on the sampling grid).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    pts = np.asarray(path, dtype=float)
    arrive, depart = vertex_times(pts, speeds, stops)
    # knot sequence: (time, vertex) with dwell vertices appearing twice
    kt, kp = [], []
    for i in range(len(pts)):
        kt.append(arrive[i])
        kp.append(pts[i])
        if depart[i] > arrive[i]:
            kt.append(depart[i])
            kp.append(pts[i])
    kt = np.asarray(kt)
    kp = np.asarray(kp)
    n = int(math.floor(arrive[-1] / dt + 1e-9)) + 1
    t = np.arange(n) * dt
    seg = np.clip(np.searchsorted(kt, t, side="right") - 1, 0, len(kt) - 2) if len(kt) > 1 else np.zeros(n, int)
    if len(kt) == 1:
        out = np.repeat(kp[:1], n, axis=0)
        moving = np.zeros(0, dtype=bool)
    else:
        span = kt[seg + 1] - kt[seg]
        f = np.where(span > 0, (t - kt[seg]) / np.where(span > 0, span, 1.0), 0.0)
        f = np.clip(f, 0.0, 1.0)[:, None]
        out = kp[seg] + f * (kp[seg + 1] - kp[seg])
        # an interval touching a dwell is not a moving interval
        in_stop = np.zeros(n, dtype=bool)
        for i in range(len(pts)):
            if depart[i] > arrive[i]:
                in_stop |= (t >= arrive[i]) & (t <= depart[i])
        moving = ~(in_stop[:-1] | in_stop[1:])
    return TimedPath(dt, out, seed, ~moving if len(moving) else None)


# ---------------------------------------------------------------------------
# end-to-end generation
# ---------------------------------------------------------------------------


def cells_to_world(grid: WalkableGrid, cells) -> np.ndarray:
    return np.array([grid.cell_center(c) for c in cells])


def generate_path(
    scene: ObstacleScene,
    seed: int,
    params: SpeedParams | None = None,
    grid: WalkableGrid | None = None,
    target_steps: int = 200,
    dt: float = 0.5,
    dp_epsilon: float = 1.0,
    samples_per_segment: int = 8,
    min_straight: float | None = None,
    max_tries: int = 200,
) -> TimedPath:
    """Plan a random walk between two far-apart walkable cells and time it.

    The timed path is truncated to ``target_steps`` samples when longer.
    """
    params = SpeedParams(seed=seed) if params is None else params
    grid = build_walkable_grid(scene) if grid is None else grid
    rng = np.random.default_rng(seed)
    free = np.argwhere(grid.occupancy)
    if len(free) < 2:
        raise ValueError("scene has fewer than two walkable cells")
    need = (0.8 * params.v_cruise * dt * target_steps) if min_straight is None else min_straight
    extent = np.array(grid.occupancy.shape) * grid.cell_size
    need = min(need, 0.7 * float(np.hypot(*extent)))
    for _ in range(max_tries):
        a = tuple(free[rng.integers(len(free))])
        b = tuple(free[rng.integers(len(free))])
        if math.hypot(a[0] - b[0], a[1] - b[1]) * grid.cell_size < need:
            continue
        cells = plan_grid_path(grid, a, b)
        if len(cells) < 2:
            continue
        break
    else:
        raise RuntimeError("could not find a connected start/goal pair")
    world = cells_to_world(grid, cells)
    simple = simplify_dp(world, dp_epsilon)
    smooth = smooth_catmull_rom(simple, samples_per_segment)
    speeds = speed_profile(smooth, params, rng)
    # dwell candidates: the simplified vertices, which sit at knot indices of the spline
    knots = [k * samples_per_segment for k in range(1, len(simple) - 1)]
    stops = draw_stops(len(smooth), params, rng, candidates=knots)
    path = resample_fixed_dt(smooth, speeds, stops, dt, seed=seed)
    path.source_cells = cells
    if len(path) > target_steps:
        path = path.truncated(target_steps)
    return path


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def write_paths_jsonl(paths, fp) -> None:
    """Each path is a header line ``{"path_id", "dt", "seed", "n"}`` followed by
    ``n`` lines ``{"t": seconds, "p": [x, y, z]}``."""
    close = False
    if isinstance(fp, (str, Path)):
        fp = open(fp, "w")
        close = True
    try:
        for k, path in enumerate(paths):
            fp.write(json.dumps({"path_id": k, "dt": path.dt, "seed": path.seed, "n": len(path)}) + "\n")
            for i, p in enumerate(path.points):
                fp.write(json.dumps({"t": round(i * path.dt, 9), "p": [round(float(x), 6) for x in p]}) + "\n")
    finally:
        if close:
            fp.close()


def read_paths_jsonl(fp) -> list[TimedPath]:
    if isinstance(fp, (str, Path)):
        lines = Path(fp).read_text().splitlines()
    else:
        lines = fp.read().splitlines()
    out = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = json.loads(lines[i])
        if "dt" not in head or "n" not in head:
            raise ValueError(f"line {i + 1}: expected a path header with dt and n")
        n = int(head["n"])
        pts = [json.loads(lines[i + 1 + k])["p"] for k in range(n)]
        out.append(TimedPath(float(head["dt"]), np.array(pts, dtype=float).reshape(-1, 3), head.get("seed")))
        i += 1 + n
    return out
