"""Tracking trajectory optimization.

An initial trajectory comes from a viewpoint search on the target's rear
hemisphere. Gradient descent on the weighted cost then refines it, using
central finite differences, a halving/recovering step size and a
per-waypoint displacement cap.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .costs import CostConfig, CostModel, TrackContext, build_context
from .geom import Bvh
from .scene import ObstacleScene

STANDARD_OFFSET = 20.0  # horizontal offset of the 45 deg, 28 m reference viewpoint
FAN_AZIMUTHS = (0.0, -15.0, 15.0, -30.0, 30.0, -45.0, 45.0, -60.0, 60.0)
FAN_HEIGHTS = (20.0, 25.0, 30.0, 35.0, 40.0)
FAN_SCALES = (0.7, 0.85, 1.0, 1.2)
SIDE_OFFSETS = (5.0, -5.0, 10.0, -10.0, 15.0, -15.0, 20.0, -20.0)


@dataclass(eq=False)
class DroneTrajectory:
    dt: float
    waypoints: np.ndarray  # (N, 3)
    yaw: np.ndarray | None = None  # degrees, compass convention
    pitch: np.ndarray | None = None  # degrees of depression

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.waypoints)):
            raise ValueError("trajectory contains non-finite coordinates")

    def __len__(self):
        return self.waypoints.shape[0]

    def copy(self, waypoints=None) -> "DroneTrajectory":
        W = self.waypoints if waypoints is None else waypoints
        return DroneTrajectory(self.dt, np.array(W, dtype=float))

    def speeds(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1) / self.dt

    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).sum())


@dataclass
class OptimizerConfig:
    epsilon: float = 0.5
    eta0: float = 0.05
    eta_min: float = 0.001
    max_step: float = 0.5
    max_iters: int = 300
    recovery_factor: float = 1.05
    early_stop_tol: float = 1e-4
    early_stop_window: int = 10
    keyframe_interval: int = 8
    v_max: float = 15.0  # dynamic-following speed cap for the initial trajectory

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.eta_min <= self.eta0:
            raise ValueError("need 0 < eta_min <= eta0")
        if self.max_step <= 0:
            raise ValueError("max_step must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown optimizer config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptReport:
    iterations: int = 0
    accepted: int = 0
    rejected: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    cost_trace: list = field(default_factory=list)  # cost after every accepted step, starting with the initial cost
    breakdown: dict = field(default_factory=dict)
    wall_ms: float = 0.0
    stop_reason: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _bvh_of(obstacles) -> Bvh:
    if isinstance(obstacles, Bvh):
        return obstacles
    if isinstance(obstacles, ObstacleScene):
        return obstacles.bvh()
    raise TypeError("expected an ObstacleScene or a Bvh")


# ---------------------------------------------------------------------------
# initial trajectory
# ---------------------------------------------------------------------------


def _rear_basis(walk):
    """Unit horizontal backward vector and its left-hand perpendicular."""
    h = np.array([walk[0], walk[1], 0.0])
    n = np.linalg.norm(h)
    if n < 1e-9:
        return None
    back = -h / n
    return back, np.array([-back[1], back[0], 0.0])


def fan_offsets(walk) -> np.ndarray:
    """Candidate drone offsets relative to the target, (M, 3).

    Azimuth is measured from straight behind the walking direction.
    """
    basis = _rear_basis(walk)
    back, side = basis if basis is not None else (np.array([-1.0, 0, 0]), np.array([0, -1.0, 0]))
    out = []
    for az in FAN_AZIMUTHS:
        a = math.radians(az)
        u = math.cos(a) * back + math.sin(a) * side
        for h in FAN_HEIGHTS:
            for s in FAN_SCALES:
                out.append(u * s * STANDARD_OFFSET + np.array([0.0, 0.0, h]))
    return np.array(out)


def _fan_scores(model: CostModel, i: int, P) -> np.ndarray:
    # unweighted vis + safe + track for a batch of candidate positions
    unit = model.cfg.only("vis", "safe", "track").with_weights(vis=1.0, safe=1.0, track=1.0)
    return CostModel(model.ctx, model.bvh, unit).candidates(P, i)[0]


def best_fan_viewpoint(model: CostModel, i: int, walk=None, prev_offset=None, tie_tol: float = 0.5) -> np.ndarray:
    """Fan candidate minimizing vis + safe + track at frame ``i``.

    Scores within ``tie_tol`` of the best count as ties. Ties go to the
    candidate nearest ``prev_offset`` (the previous keyframe's offset from its
    target), else to fan order, which starts straight behind.
    """
    wd = model.ctx.walk_dir[i] if walk is None else walk
    off = fan_offsets(wd)
    s = _fan_scores(model, i, model.ctx.target[i] + off)
    tied = np.nonzero(s <= s.min() + tie_tol)[0]
    if prev_offset is None or len(tied) == 1:
        k = int(tied[0])
    else:
        k = int(tied[np.argmin(np.linalg.norm(off[tied] - prev_offset, axis=1))])
    return model.ctx.target[i] + off[k]


def keyframe_indices(n: int, interval: int) -> np.ndarray:
    k = list(range(0, n, interval))
    if k[-1] != n - 1:
        k.append(n - 1)
    return np.array(k)


def _last_walk(ctx: TrackContext):
    # frames with zero walking direction reuse the most recent nonzero one (+x before any)
    out = np.empty_like(ctx.walk_dir)
    cur = np.array([1.0, 0.0, 0.0])
    for i, w in enumerate(ctx.walk_dir):
        if np.hypot(w[0], w[1]) > 1e-9:
            cur = w
        out[i] = cur
    return out


def _ramp_weights(n: int, lo: int, hi: int, ramp: int) -> np.ndarray:
    """1 on [lo, hi], linear ramps of ``ramp`` frames on each side, 0 elsewhere."""
    w = np.zeros(n)
    w[lo:hi + 1] = 1.0
    for k in range(1, ramp + 1):
        f = 1.0 - k / (ramp + 1)
        if lo - k >= 0:
            w[lo - k] = f
        if hi + k < n:
            w[hi + k] = f
    return w


def low_runs(mask) -> list[tuple[int, int]]:
    """Maximal runs of True as inclusive (start, end) pairs."""
    runs = []
    start = None
    for i, m in enumerate(mask):
        if m and start is None:
            start = i
        elif not m and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(mask) - 1))
    return runs


def follow_dynamically(W, target, walk, v_max: float, dt: float) -> np.ndarray:
    """Clamp per-frame drone speed and keep the drone from passing the target."""
    W = np.array(W, dtype=float)
    lim = v_max * dt
    for i in range(len(W)):
        basis = _rear_basis(walk[i])
        if basis is not None:
            fwd = -basis[0]
            ahead = float((W[i] - target[i]) @ fwd)
            if ahead > 0.0:
                W[i] -= ahead * fwd
        if i > 0:
            step = W[i] - W[i - 1]
            n = float(np.linalg.norm(step))
            if n > lim:
                W[i] = W[i - 1] + step * (lim / n)
    return W


def bridge_occlusions(model: CostModel, W, min_run: int = 6, ramp: int = 5, vis_tol: float = 0.05) -> np.ndarray:
    """Shift occluded runs sideways (perpendicular to walking) where that helps."""
    W = np.array(W, dtype=float)
    walk = _last_walk(model.ctx)
    vis = model.visibility(W)
    for lo, hi in low_runs(vis < 0.5):
        if hi - lo + 1 < min_run:
            continue
        wts = _ramp_weights(len(W), lo, hi, ramp)
        idx = np.nonzero(wts)[0]
        base = float(vis[lo:hi + 1].mean())
        tried = []
        for off in SIDE_OFFSETS:
            cand = W.copy()
            for i in idx:
                _, side = _rear_basis(walk[i])
                cand[i] = W[i] + wts[i] * off * side
            if np.any(model.clearance(cand[idx]) <= 0.0):
                continue
            tried.append((float(model.visibility(cand)[lo:hi + 1].mean()), cand))
        best_W = None
        if tried and max(v for v, _ in tried) > base:
            top = max(v for v, _ in tried)
            # smallest shift (SIDE_OFFSETS is ordered by magnitude) that nearly matches the best
            best_W = next(c for v, c in tried if v > base and v >= top - vis_tol)
        if best_W is not None:
            W = best_W
            vis = model.visibility(W)
    return W


def init_trajectory(path, ctx: TrackContext, bvh, cfg: CostConfig | None = None, ocfg: OptimizerConfig | None = None) -> DroneTrajectory:
    """Keyframe viewpoint search, interpolation, dynamic following and occlusion bridging."""
    ocfg = OptimizerConfig() if ocfg is None else ocfg
    pts = np.asarray(getattr(path, "points", path), dtype=float).reshape(-1, 3)
    dt = float(getattr(path, "dt", 0.5))
    n = len(pts)
    if n < 1:
        raise ValueError("empty path")
    model = CostModel(ctx, _bvh_of(bvh), cfg)
    walk = _last_walk(ctx)
    if n == 1:
        return DroneTrajectory(dt, best_fan_viewpoint(model, 0, walk[0])[None])
    keys = keyframe_indices(n, ocfg.keyframe_interval)
    offs = []
    prev = None
    for k in keys:
        prev = best_fan_viewpoint(model, int(k), walk[k], prev) - pts[k]
        offs.append(prev)
    offs = np.array(offs)
    # offsets relative to the target interpolate without cutting corners of the target path
    off = np.column_stack([np.interp(np.arange(n), keys, offs[:, c]) for c in range(3)])
    W = follow_dynamically(pts + off, pts, walk, ocfg.v_max, dt)
    W = bridge_occlusions(model, W)
    return DroneTrajectory(dt, W)


# ---------------------------------------------------------------------------
# gradient descent
# ---------------------------------------------------------------------------


def fd_gradient(traj, ctx: TrackContext, bvh, cfg: CostConfig | None = None, ocfg: OptimizerConfig | None = None) -> np.ndarray:
    """Central-difference gradient, (N, 3), re-evaluating only terms that touch each waypoint."""
    ocfg = OptimizerConfig() if ocfg is None else ocfg
    W = getattr(traj, "waypoints", traj)
    return CostModel(ctx, _bvh_of(bvh), cfg).gradient(W, ocfg.epsilon)


def clip_steps(delta, max_step: float) -> np.ndarray:
    n = np.linalg.norm(delta, axis=1, keepdims=True)
    scale = np.minimum(1.0, max_step / np.maximum(n, 1e-300))
    return delta * scale


def descend(model: CostModel, W0, ocfg: OptimizerConfig, on_step=None):
    """Gradient descent from ``W0``. Returns (W, report) with the breakdown unset."""
    W = np.array(W0, dtype=float)
    C = model.total(W)
    rep = OptReport(initial_cost=C, cost_trace=[C])
    eta = ocfg.eta0
    win = ocfg.early_stop_window
    rep.stop_reason = "max_iters"
    for it in range(ocfg.max_iters):
        g = model.gradient(W, ocfg.epsilon)
        rep.iterations = it + 1
        if not np.any(g):
            rep.stop_reason = "zero_gradient"
            break
        delta = clip_steps(-eta * g, ocfg.max_step)
        Wn = W + delta
        Cn = model.total(Wn)
        if Cn > C:
            rep.rejected += 1
            if eta <= ocfg.eta_min:
                # the next proposal would be identical
                rep.stop_reason = "step_floor"
                break
            eta = max(eta / 2.0, ocfg.eta_min)
            continue
        if on_step is not None:
            on_step(W, Wn)
        W, C = Wn, Cn
        rep.accepted += 1
        rep.cost_trace.append(C)
        eta = min(eta * ocfg.recovery_factor, ocfg.eta0)
        if len(rep.cost_trace) > win:
            old = rep.cost_trace[-win - 1]
            if old - C < ocfg.early_stop_tol * max(abs(old), 1e-12):
                rep.stop_reason = "converged"
                break
    rep.final_cost = C
    return W, rep


def optimize(path, scene, cfg: CostConfig | None = None, ocfg: OptimizerConfig | None = None, ctx: TrackContext | None = None, init: DroneTrajectory | None = None):
    """Optimize a tracking trajectory for ``path`` among the obstacles of ``scene``.

    ``scene`` may be an :class:`ObstacleScene` (ideally already filtered for the
    path) or a prebuilt :class:`Bvh`. Returns ``(DroneTrajectory, OptReport)``.
    """
    t0 = time.perf_counter()
    cfg = CostConfig() if cfg is None else cfg
    ocfg = OptimizerConfig() if ocfg is None else ocfg
    bvh = _bvh_of(scene)
    ctx = build_context(path) if ctx is None else ctx
    if init is None:
        init = init_trajectory(path, ctx, bvh, cfg, ocfg)
    model = CostModel(ctx, bvh, cfg)
    W, rep = descend(model, init.waypoints, ocfg)
    rep.breakdown = model.breakdown(W).to_dict()
    traj = DroneTrajectory(init.dt, W)
    traj.yaw, traj.pitch = derive_poses(traj, ctx)
    rep.wall_ms = (time.perf_counter() - t0) * 1e3
    return traj, rep


# ---------------------------------------------------------------------------
# poses and I/O
# ---------------------------------------------------------------------------


def look_angles(w, p, prev_yaw: float = 0.0) -> tuple[float, float]:
    """(yaw, pitch) in degrees for a camera at ``w`` looking at ``p``.

    Yaw is a compass heading: 0 faces +y (north), 90 faces +x (east), in
    (-180, 180]. Pitch is the depression angle, positive looking down. Looking
    straight down leaves yaw undefined, so ``prev_yaw`` is held.
    """
    lx, ly, lz = (float(p[k]) - float(w[k]) for k in range(3))
    hz = math.hypot(lx, ly)
    pitch = math.degrees(math.atan2(-lz, hz))
    if hz < 1e-9:
        return prev_yaw, pitch
    yaw = math.degrees(math.atan2(lx, ly))
    if yaw <= -180.0:
        yaw += 360.0
    return yaw, pitch


def derive_poses(traj, ctx) -> tuple[np.ndarray, np.ndarray]:
    W = getattr(traj, "waypoints", traj)
    target = getattr(ctx, "target", ctx)
    yaw = np.empty(len(W))
    pitch = np.empty(len(W))
    prev = 0.0
    for i in range(len(W)):
        prev, pitch[i] = look_angles(W[i], target[i], prev)
        yaw[i] = prev
    return yaw, pitch


def trajectory_frames(traj: DroneTrajectory, target, vis=None) -> list[dict]:
    target = np.asarray(getattr(target, "target", target), dtype=float)
    if traj.yaw is None or traj.pitch is None:
        traj.yaw, traj.pitch = derive_poses(traj, target)
    out = []
    for i, w in enumerate(traj.waypoints):
        out.append({
            "t": round(i * traj.dt, 9),
            "p": [round(float(x), 6) for x in w],
            "yaw": round(float(traj.yaw[i]), 6),
            "pitch": round(float(traj.pitch[i]), 6),
            "roll": 0.0,
            "vis": None if vis is None else round(float(vis[i]), 6),
            "target": [round(float(x), 6) for x in target[i]],
        })
    return out


def write_trajectories_jsonl(items, fp) -> None:
    """``items`` yields (traj_id, DroneTrajectory, target points, visibility or None).

    Each trajectory is a header line ``{"traj_id", "dt", "n"}`` followed by one
    frame per line.
    """
    close = False
    if isinstance(fp, (str, Path)):
        fp = open(fp, "w")
        close = True
    try:
        for tid, traj, target, vis in items:
            fp.write(json.dumps({"traj_id": tid, "dt": traj.dt, "n": len(traj)}) + "\n")
            for fr in trajectory_frames(traj, target, vis):
                fp.write(json.dumps(fr) + "\n")
    finally:
        if close:
            fp.close()


def read_trajectories_jsonl(fp) -> list[tuple]:
    """Inverse of :func:`write_trajectories_jsonl`: list of (traj_id, DroneTrajectory, frames)."""
    lines = [ln for ln in (Path(fp).read_text() if isinstance(fp, (str, Path)) else fp.read()).splitlines() if ln.strip()]
    out = []
    i = 0
    while i < len(lines):
        head = json.loads(lines[i])
        if "n" not in head or "dt" not in head:
            raise ValueError(f"line {i + 1}: expected a trajectory header")
        n = int(head["n"])
        frames = [json.loads(s) for s in lines[i + 1:i + 1 + n]]
        if len(frames) != n:
            raise ValueError(f"trajectory {head.get('traj_id')} is truncated")
        traj = DroneTrajectory(float(head["dt"]), np.array([f["p"] for f in frames], dtype=float))
        traj.yaw = np.array([f["yaw"] for f in frames], dtype=float)
        traj.pitch = np.array([f["pitch"] for f in frames], dtype=float)
        out.append((head.get("traj_id"), traj, frames))
        i += 1 + n
    return out
