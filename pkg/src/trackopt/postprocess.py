"""Seven-step post-optimization pipeline.

Steps run in a fixed order. Three geometric clean-ups (occluded-run
straightening, detour elimination, oscillation removal) are followed by the
hard safety layers and a final audit.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .costs import CostConfig, CostModel, TrackContext
from .geom import Bvh
from .optimizer import DroneTrajectory, _bvh_of, _ramp_weights, derive_poses, low_runs
from .pedestrian import menger_curvature
from .safety import (
    SafetyConfig,
    altitude_smooth,
    clearances,
    final_safety_check,
    project_trajectory,
    velocity_repair,
)

STEPS = (
    "straighten_occluded",
    "eliminate_detours",
    "remove_oscillations",
    "project_trajectory",
    "velocity_repair",
    "altitude_smooth",
    "final_safety_check",
)
AZIMUTH_OFFSETS = tuple(s * a for a in range(15, 91, 15) for s in (1, -1))


def _W(traj):
    return np.array(getattr(traj, "waypoints", traj), dtype=float)


def _rotate_about(W, P, angles):
    """Rotate each ``W[i]`` about the vertical axis through ``P[i]`` by ``angles[i]`` degrees."""
    out = W.copy()
    a = np.radians(angles)
    c, s = np.cos(a), np.sin(a)
    dx, dy = W[:, 0] - P[:, 0], W[:, 1] - P[:, 1]
    out[:, 0] = P[:, 0] + c * dx - s * dy
    out[:, 1] = P[:, 1] + s * dx + c * dy
    return out


def straighten_occluded(traj, ctx: TrackContext, bvh: Bvh, threshold: float = 0.5, min_run: int = 6, ramp: int = 5):
    """Swing long low-visibility runs around the target to the best azimuth.

    A run is a maximal stretch of frames with visibility below ``threshold``
    lasting at least ``min_run`` frames. Offsets are ramped in and out over
    ``ramp`` frames. Runs where no offset raises mean visibility stay put.
    """
    W = _W(traj)
    model = CostModel(ctx, bvh)
    vis = model.visibility(W)
    for lo, hi in low_runs(vis < threshold):
        if hi - lo + 1 < min_run:
            continue
        wts = _ramp_weights(len(W), lo, hi, ramp)
        touched = np.nonzero(wts)[0]
        best_v = float(vis[lo:hi + 1].mean())
        best = None
        for az in AZIMUTH_OFFSETS:
            cand = _rotate_about(W, ctx.target, az * wts)
            if np.any(clearances(bvh, cand[touched]) <= 0.0):
                continue
            v = float(model.visibility(cand)[lo:hi + 1].mean())
            if v > best_v:
                best_v, best = v, cand
        if best is not None:
            W = best
            vis = model.visibility(W)
    return DroneTrajectory(getattr(traj, "dt", 0.5), W)


def curvature_profile(W) -> np.ndarray:
    k = np.zeros(len(W))
    for i in range(1, len(W) - 1):
        k[i] = menger_curvature(W[i - 1], W[i], W[i + 1])
    return k


def eliminate_detours(traj, bvh: Bvh | None = None, ctx: TrackContext | None = None, kappa_max: float = 0.5, margin: float = 2.0):
    """Replace high-curvature stretches by their chord where the chord is safe
    and sees the target at least as well. Frame count is preserved."""
    W = _W(traj)
    kappa = curvature_profile(W)
    model = CostModel(ctx, bvh) if (ctx is not None and bvh is not None) else None
    for a, b in low_runs(kappa > kappa_max):
        lo, hi = a - 1, b + 1
        u = np.linspace(0.0, 1.0, hi - lo + 1)[:, None]
        chord = W[lo] + u * (W[hi] - W[lo])
        if bvh is not None:
            if bvh.segment_blocked(W[lo], W[hi]):
                continue
            if np.any(clearances(bvh, chord[1:-1]) < margin):
                continue
        if model is not None:
            cand = W.copy()
            cand[lo:hi + 1] = chord
            if model.visibility(cand)[lo:hi + 1].sum() < model.visibility(W)[lo:hi + 1].sum():
                continue
        W[lo:hi + 1] = chord
    return DroneTrajectory(getattr(traj, "dt", 0.5), W)


def reversal_flags(W) -> np.ndarray:
    """flags[i] is True when the horizontal step into frame i and the one out of it point apart."""
    d = np.diff(W[:, :2], axis=0)
    f = np.zeros(len(W), dtype=bool)
    if len(d) >= 2:
        f[1:-1] = np.einsum("ij,ij->i", d[:-1], d[1:]) < 0.0
    return f


def remove_oscillations(traj, min_run: int = 3, half: int = 2, max_passes: int = 10):
    """Sliding-average x, y over runs of at least ``min_run`` consecutive
    horizontal reversals; isolated turns are left alone."""
    W = _W(traj)
    n = len(W)
    for _ in range(max_passes):
        runs = [(lo, hi) for lo, hi in low_runs(reversal_flags(W)) if hi - lo + 1 >= min_run]
        if not runs:
            break
        src = W.copy()
        for lo, hi in runs:
            for i in range(lo, hi + 1):
                h = min(half, i, n - 1 - i)
                W[i, :2] = src[i - h:i + h + 1, :2].mean(axis=0)
    return DroneTrajectory(getattr(traj, "dt", 0.5), W)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: str
    cost: float
    visibility: float
    path_length: float
    max_speed: float
    min_clearance: float
    delta: dict = field(default_factory=dict)
    moved_max: float = 0.0  # largest waypoint displacement this step


@dataclass
class PipelineReport:
    steps: list = field(default_factory=list)
    passed: bool = False
    unresolvable: list = field(default_factory=list)
    projection: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)
    safety: dict = field(default_factory=dict)

    @property
    def order(self) -> list[str]:
        return [s.step for s in self.steps]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["safety"] = {k: v for k, v in d["safety"].items() if k != "clearance"}
        return d


def _snapshot(name, W, model: CostModel, dt, prev: StepRecord | None, W_prev):
    n = len(W)
    steps = np.linalg.norm(np.diff(W, axis=0), axis=1)
    clear = model.clearance(W)
    rec = StepRecord(
        step=name,
        cost=model.total(W) if n >= 1 else 0.0,
        visibility=float(model.visibility(W).mean()),
        path_length=float(steps.sum()),
        max_speed=float(steps.max() / dt) if n > 1 else 0.0,
        min_clearance=float(min(clear.min(), 1e9)),
    )
    if prev is not None:
        for k in ("cost", "visibility", "path_length", "max_speed", "min_clearance"):
            rec.delta[k] = getattr(rec, k) - getattr(prev, k)
        rec.moved_max = float(np.linalg.norm(W - W_prev, axis=1).max()) if n else 0.0
    return rec


def run_pipeline(traj, ctx: TrackContext, scene, cfg: CostConfig | None = None, scfg: SafetyConfig | None = None):
    """Apply the seven steps in order; returns ``(traj, PipelineReport)``.

    ``report.passed`` is the final audit verdict, so a failing trajectory is
    never returned silently.
    """
    scfg = SafetyConfig() if scfg is None else scfg
    bvh = _bvh_of(scene)
    dt = float(getattr(traj, "dt", 0.5))
    model = CostModel(ctx, bvh, cfg)
    rep = PipelineReport()
    W = _W(traj)
    base = _snapshot("input", W, model, dt, None, W)
    prev = base

    def record(name, W_new, W_old):
        nonlocal prev
        prev = _snapshot(name, W_new, model, dt, prev, W_old)
        rep.steps.append(prev)

    t = straighten_occluded(W, ctx, bvh)
    record(STEPS[0], t.waypoints, W)
    W = t.waypoints
    t = eliminate_detours(W, bvh, ctx, margin=scfg.hard_margin)
    record(STEPS[1], t.waypoints, W)
    W = t.waypoints
    t = remove_oscillations(W)
    record(STEPS[2], t.waypoints, W)
    W = t.waypoints
    t, prep = project_trajectory(DroneTrajectory(dt, W), bvh, ctx, cfg, scfg)
    record(STEPS[3], t.waypoints, W)
    W = t.waypoints
    rep.projection = prep.to_dict()
    t, vrep = velocity_repair(DroneTrajectory(dt, W), scfg.v_max, dt, bvh, scfg.hard_margin)
    record(STEPS[4], t.waypoints, W)
    W = t.waypoints
    rep.velocity = vrep.to_dict()
    t = altitude_smooth(DroneTrajectory(dt, W), bvh, scfg.hard_margin)
    record(STEPS[5], t.waypoints, W)
    W = t.waypoints
    audit = final_safety_check(W, bvh, scfg)
    record(STEPS[6], W, W)
    rep.safety = audit.to_dict()
    rep.passed = audit.passed
    rep.unresolvable = list(prep.unresolvable)
    out = DroneTrajectory(dt, W)
    out.yaw, out.pitch = derive_poses(out, ctx)
    return out, rep
