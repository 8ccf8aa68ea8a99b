"""Hard safety layers: waypoint projection, velocity repair, altitude smoothing
and the final clearance audit.

The soft safety cost only discourages flying near obstacles. These layers
enforce a hard clearance margin on every waypoint and keep every inter-frame
segment out of obstacle interiors.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .costs import CostConfig, CostModel, TrackContext, clearance_kernel
from .geom import Bvh


@dataclass
class SafetyConfig:
    hard_margin: float = 2.0
    deep_threshold: float = 5.0
    lift_limit: float = 3.0
    detour_fan: float = 35.0  # degrees either side
    fan_step: float = 5.0
    max_projection_rounds: int = 5
    v_max: float = 15.0
    bypass_max: float = 5.0
    pushout_step: float = 1.0
    search_step: float = 0.5
    max_lift: float = 40.0  # vertical search bound for the lift candidate
    max_detour: float = 25.0  # horizontal search bound for detour candidates

    def __post_init__(self):
        for k in ("hard_margin", "deep_threshold", "lift_limit", "detour_fan", "fan_step", "v_max",
                  "bypass_max", "pushout_step", "search_step", "max_lift", "max_detour"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.max_projection_rounds < 1:
            raise ValueError("max_projection_rounds must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SafetyConfig":
        return cls(**d)


def clearances(bvh: Bvh, P) -> np.ndarray:
    P = np.ascontiguousarray(np.asarray(P, dtype=float).reshape(-1, 3))
    return clearance_kernel(bvh.packed, P)


def is_clear(bvh: Bvh, p, margin: float) -> bool:
    return bvh.min_distance(p) >= margin


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


@dataclass
class Projection:
    point: np.ndarray
    strategy: str  # none | pushout | lift | lift_far | bypass | detour | gradient | toward_prev | last_resort
    cost_increase: float = 0.0
    resolved: bool = True
    candidates: list = field(default_factory=list)  # (strategy, point, cost increase)


def _first_clear(bvh, P, margin):
    """Index of the first row of ``P`` with clearance >= margin, or -1."""
    if len(P) == 0:
        return -1
    ok = np.nonzero(clearances(bvh, P) >= margin)[0]
    return int(ok[0]) if len(ok) else -1


def _ray_search(bvh, w, direction, max_dist, step, margin):
    d = np.arange(step, max_dist + 1e-9, step)
    P = w[None] + d[:, None] * direction[None]
    k = _first_clear(bvh, P, margin)
    return None if k < 0 else P[k]


def pushout(bvh: Bvh, w, margin: float, step: float = 1.0, max_steps: int = 1000):
    """Walk along the distance gradient in fixed steps until the margin holds."""
    q = np.array(w, dtype=float)
    for _ in range(max_steps):
        if bvh.min_distance(q) >= margin:
            return q
        g = bvh.distance_gradient(q)
        if not np.any(g):
            return None
        q = q + step * g
    return None


def last_resort_lift(bvh: Bvh, w, margin: float) -> np.ndarray:
    """Straight up until clear; above the tallest box this always succeeds."""
    q = np.array(w, dtype=float)
    top = float(bvh.box_max[:, 2].max()) if bvh.n_boxes else q[2]
    up = _ray_search(bvh, q, np.array([0.0, 0.0, 1.0]), max(top + margin - q[2], 0.0) + 1.0, 0.5, margin)
    if up is None:
        q[2] = max(q[2], top + margin)
        return q
    return up


def projection_candidates(w, bvh: Bvh, scfg: SafetyConfig, tangent=None, anchor=None) -> list[tuple[str, np.ndarray]]:
    """Clearing candidates from the four strategies: lift, forward bypass,
    horizontal detour fan and displacement along the distance gradient.

    A clear ``anchor`` (the already projected previous waypoint) adds one more
    local displacement: the first clear point on the way toward it.
    """
    w = np.asarray(w, dtype=float)
    m = scfg.hard_margin
    out = []
    up = _ray_search(bvh, w, np.array([0.0, 0.0, 1.0]), scfg.max_lift, scfg.search_step, m)
    if up is not None:
        out.append(("lift", up))
    if tangent is not None and np.linalg.norm(tangent) > 1e-9:
        t = np.asarray(tangent, float) / np.linalg.norm(tangent)
        for s in (1.0, -1.0):
            q = _ray_search(bvh, w, s * t, scfg.bypass_max, scfg.search_step, m)
            if q is not None:
                out.append(("bypass", q))
    g = bvh.distance_gradient(w)
    centers = []
    if math.hypot(g[0], g[1]) > 1e-9:
        centers.append(math.atan2(g[1], g[0]))
    elif tangent is not None and math.hypot(tangent[0], tangent[1]) > 1e-9:
        a = math.atan2(tangent[1], tangent[0])
        centers += [a + math.pi / 2, a - math.pi / 2]
    else:
        centers += [0.0, math.pi / 2, math.pi, -math.pi / 2]
    n_half = int(round(scfg.detour_fan / scfg.fan_step))
    for c in centers:
        for k in range(-n_half, n_half + 1):
            a = c + math.radians(k * scfg.fan_step)
            q = _ray_search(bvh, w, np.array([math.cos(a), math.sin(a), 0.0]), scfg.max_detour, scfg.search_step, m)
            if q is not None:
                out.append(("detour", q))
    q = pushout(bvh, w, m, step=scfg.search_step, max_steps=int(scfg.max_detour / scfg.search_step))
    if q is not None:
        out.append(("gradient", q))
    if anchor is not None:
        a = np.asarray(anchor, float) - w
        dist = float(np.linalg.norm(a))
        if dist > 1e-9:
            q = _ray_search(bvh, w, a / dist, dist, scfg.search_step, m)
            if q is None and bvh.min_distance(anchor) >= m:
                q = np.asarray(anchor, float).copy()
            if q is not None:
                out.append(("toward_prev", q))
    return out


def project_waypoint(w, bvh: Bvh, model: CostModel | None = None, i: int = 0, scfg: SafetyConfig | None = None, tangent=None,
                     prev=None, nxt=None, reach: float | None = None) -> Projection:
    """Move one waypoint to at least ``hard_margin`` clearance.

    ``model`` scores candidates by the increase of the waypoint's local cost
    (track, vis, view, pitch, altitude band); without it, the shortest move wins.
    Given the neighboring waypoints and ``reach`` (one step at top speed),
    candidates within reach of both neighbors are preferred, then those within
    reach of ``prev``, whenever such candidates exist.
    """
    scfg = SafetyConfig() if scfg is None else scfg
    w = np.asarray(w, dtype=float)
    m = scfg.hard_margin
    if bvh.min_distance(w) >= m:
        return Projection(w.copy(), "none")
    if bvh.penetration_depth(w) > scfg.deep_threshold:
        q = pushout(bvh, w, m, scfg.pushout_step)
        if q is not None:
            return Projection(q, "pushout")
    else:
        q = _ray_search(bvh, w, np.array([0.0, 0.0, 1.0]), scfg.lift_limit, 0.1, m)
        if q is not None:
            return Projection(q, "lift")
    cands = projection_candidates(w, bvh, scfg, tangent, prev)
    if not cands:
        return Projection(last_resort_lift(bvh, w, m), "last_resort", resolved=False)
    P = np.array([p for _, p in cands])
    if model is not None:
        local = CostModel(model.ctx, model.bvh, model.cfg.with_weights(safe=0.0, smooth=0.0, jerk=0.0, len=0.0))
        costs = local.candidates(np.vstack([w[None], P]), i)[0]
        inc = costs[1:] - costs[0]
    else:
        inc = np.linalg.norm(P - w, axis=1)
    within = [np.linalg.norm(P - np.asarray(q, float), axis=1) <= reach for q in (prev, nxt) if q is not None]
    if reach is not None and within:
        tiers = [np.logical_and.reduce(within)] + ([within[0]] if prev is not None else [])
        for near in tiers:
            if near.any():
                inc = np.where(near, inc, np.inf)
                break
    k = int(np.argmin(inc))  # first minimum keeps strategy order on ties
    scored = [(s, p, float(c)) for (s, p), c in zip(cands, inc) if np.isfinite(c)]
    return Projection(P[k].copy(), cands[k][0] if cands[k][0] != "lift" else "lift_far", float(inc[k]), True, scored)


@dataclass
class ProjectionReport:
    rounds: int = 0
    actions: list = field(default_factory=list)  # (round, frame, strategy)
    unresolvable: list = field(default_factory=list)  # frames
    residual: list = field(default_factory=list)  # frames still below margin or with blocked segments

    def to_dict(self) -> dict:
        return asdict(self)


def _tangent(W, i):
    a = W[max(i - 1, 0)]
    b = W[min(i + 1, len(W) - 1)]
    return b - a


def _fix_segment(bvh, W, i, scfg):
    """Lift both ends of a blocked segment (i, i+1) together until it is free."""
    m = scfg.hard_margin
    for dz in np.arange(scfg.search_step, scfg.max_lift + 1e-9, scfg.search_step):
        a = W[i] + (0, 0, dz)
        b = W[i + 1] + (0, 0, dz)
        if bvh.min_distance(a) >= m and bvh.min_distance(b) >= m and not bvh.segment_blocked(a, b):
            if (i == 0 or not bvh.segment_blocked(W[i - 1], a)) and (i + 2 >= len(W) or not bvh.segment_blocked(b, W[i + 2])):
                return a, b
    return None


def project_trajectory(traj, bvh: Bvh, ctx: TrackContext | None = None, cfg: CostConfig | None = None, scfg: SafetyConfig | None = None):
    """Project every frame to the clearance margin, then repair blocked segments.

    Returns ``(trajectory, ProjectionReport)``; frames are processed in order so
    later projections see earlier fixes.
    """
    from .optimizer import DroneTrajectory

    scfg = SafetyConfig() if scfg is None else scfg
    W = np.array(getattr(traj, "waypoints", traj), dtype=float)
    model = CostModel(ctx, bvh, cfg) if ctx is not None else None
    dt = float(getattr(traj, "dt", 0.5))
    rep = ProjectionReport()
    m = scfg.hard_margin
    unres = set()
    for r in range(scfg.max_projection_rounds):
        clear = clearances(bvh, W)
        bad = np.nonzero(clear < m)[0]
        blocked = [i for i in range(len(W) - 1) if bvh.segment_blocked(W[i], W[i + 1])]
        if len(bad) == 0 and not blocked:
            break
        rep.rounds = r + 1
        for i in bad:
            if bvh.min_distance(W[i]) >= m:
                continue
            pr = project_waypoint(W[i], bvh, model, int(i), scfg, _tangent(W, i),
                                  W[i - 1] if i > 0 else None, W[i + 1] if i + 1 < len(W) else None, scfg.v_max * dt)
            W[i] = pr.point
            rep.actions.append((r, int(i), pr.strategy))
            if not pr.resolved:
                unres.add(int(i))
        for i in range(len(W) - 1):
            if bvh.segment_blocked(W[i], W[i + 1]):
                fix = _fix_segment(bvh, W, i, scfg)
                if fix is None:
                    unres.add(int(i))
                    continue
                W[i], W[i + 1] = fix
                rep.actions.append((r, int(i), "segment_lift"))
    rep.unresolvable = sorted(unres)
    rep.residual = _violations(bvh, W, m)
    return DroneTrajectory(dt, W), rep


def _violations(bvh, W, margin):
    clear = clearances(bvh, W)
    bad = set(np.nonzero(clear < margin)[0].tolist())
    bad |= {i for i in range(len(W) - 1) if bvh.segment_blocked(W[i], W[i + 1])}
    return sorted(int(i) for i in bad)


# ---------------------------------------------------------------------------
# velocity repair
# ---------------------------------------------------------------------------


@dataclass
class VelocityReport:
    repaired: list = field(default_factory=list)  # (first frame, frames spread over)
    unrepaired: list = field(default_factory=list)  # frames left above v_max to stay safe
    infeasible: bool = False
    max_speed_before: float = 0.0
    max_speed_after: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _resample_polyline(P, k):
    """``k + 1`` points evenly spaced by arc length along polyline ``P``."""
    seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    u = np.linspace(0.0, s[-1], k + 1)
    return np.column_stack([np.interp(u, s, P[:, c]) for c in range(3)])


def _span_safe(bvh, Q, margin):
    if bvh is None:
        return True
    if np.any(clearances(bvh, Q[1:-1]) < margin):
        return False
    return not any(bvh.segment_blocked(Q[j], Q[j + 1]) for j in range(len(Q) - 1))


def velocity_repair(traj, v_max: float = 15.0, dt: float | None = None, bvh: Bvh | None = None, margin: float = 2.0):
    """Spread over-speed steps across the following frames.

    A step above ``v_max * dt`` starting at frame ``i - 1`` is replaced by an
    arc-length resampling (or, failing that, the straight chord) of frames
    ``i - 1 .. i - 1 + K`` with the smallest
    ``K`` whose steps all fit the limit and (given ``bvh``) keep clearance and
    free segments. The final waypoint never moves. Returns ``(traj, report)``.
    """
    from .optimizer import DroneTrajectory

    dt = float(getattr(traj, "dt", 0.5) if dt is None else dt)
    W = np.array(getattr(traj, "waypoints", traj), dtype=float)
    n = len(W)
    rep = VelocityReport()
    if n < 2:
        return DroneTrajectory(dt, W), rep
    if dt <= 0 or v_max <= 0:
        rep.infeasible = True
        return DroneTrajectory(dt if dt > 0 else 1.0, W), rep
    lim = v_max * dt
    steps = np.linalg.norm(np.diff(W, axis=0), axis=1)
    rep.max_speed_before = float(steps.max() / dt)
    tol = 1e-9 * dt
    i = 1
    while i < n:
        if np.linalg.norm(W[i] - W[i - 1]) <= lim + tol:
            i += 1
            continue
        s = i - 1
        done = False
        for K in range(2, n - s):
            P = W[s:s + K + 1]
            arc = float(np.linalg.norm(np.diff(P, axis=0), axis=1).sum())
            if arc / K > lim:
                continue
            u = np.linspace(0.0, 1.0, K + 1)[:, None]
            for Q in (_resample_polyline(P, K), P[0] + u * (P[-1] - P[0])):
                Q[0], Q[-1] = P[0], P[-1]
                if np.max(np.linalg.norm(np.diff(Q, axis=0), axis=1)) > lim + tol:
                    continue
                if not _span_safe(bvh, Q, margin):
                    continue  # damped: try the chord, then spread wider
                W[s:s + K + 1] = Q
                rep.repaired.append((s, K))
                done = True
                break
            if done:
                break
        if not done:
            if np.linalg.norm(W[-1] - W[s]) > lim * (n - 1 - s) + tol:
                rep.infeasible = True
            rep.unrepaired.append(i)
        i += 1
    rep.max_speed_after = float(np.linalg.norm(np.diff(W, axis=0), axis=1).max() / dt)
    return DroneTrajectory(dt, W), rep


# ---------------------------------------------------------------------------
# altitude smoothing
# ---------------------------------------------------------------------------


def moving_average_z(z, lo: int = 0, hi: int | None = None, half: int = 2) -> np.ndarray:
    """Centered average over up to ``2 * half + 1`` frames, window shrinking
    symmetrically near the ends (end frames stay put). Only ``lo..hi`` change."""
    z = np.asarray(z, dtype=float)
    n = len(z)
    hi = n - 1 if hi is None else hi
    out = z.copy()
    for i in range(lo, hi + 1):
        h = min(half, i, n - 1 - i)
        out[i] = z[i - h:i + h + 1].mean()
    return out


def alternating_runs(z, tol: float = 1e-3, min_len: int = 4) -> list[tuple[int, int]]:
    """Frame spans covered by at least ``min_len`` consecutive Δz of alternating sign."""
    dz = np.diff(z)
    sgn = np.where(dz > tol, 1, np.where(dz < -tol, -1, 0))
    runs = []
    k = 0
    while k < len(sgn):
        if sgn[k] == 0:
            k += 1
            continue
        e = k
        while e + 1 < len(sgn) and sgn[e + 1] != 0 and sgn[e + 1] == -sgn[e]:
            e += 1
        if e - k + 1 >= min_len:
            runs.append((k, e + 1))
        k = e + 1
    return runs


def _apply_z(bvh, W, znew, lo, hi, margin):
    # sequential accept/revert keeps every accepted frame and its segments safe
    for i in range(lo, hi + 1):
        if znew[i] == W[i, 2]:
            continue
        q = W[i].copy()
        q[2] = znew[i]
        if bvh is not None:
            if bvh.min_distance(q) < margin:
                continue
            if i > 0 and bvh.segment_blocked(W[i - 1], q):
                continue
            if i + 1 < len(W) and bvh.segment_blocked(q, W[i + 1]):
                continue
        W[i] = q


def altitude_smooth(traj, bvh: Bvh | None = None, margin: float = 2.0, max_passes: int = 50):
    """Five-frame moving average on altitude with a clearance-preserving revert.

    After one full pass, runs of more than three alternating-sign altitude
    steps are smoothed again until none remain (or ``max_passes`` is hit).
    """
    from .optimizer import DroneTrajectory

    W = np.array(getattr(traj, "waypoints", traj), dtype=float)
    if len(W) < 3:
        return DroneTrajectory(getattr(traj, "dt", 0.5), W)
    _apply_z(bvh, W, moving_average_z(W[:, 2]), 0, len(W) - 1, margin)
    for _ in range(max_passes):
        runs = alternating_runs(W[:, 2])
        if not runs:
            break
        before = W[:, 2].copy()
        for lo, hi in runs:
            _apply_z(bvh, W, moving_average_z(W[:, 2], lo, hi), lo, hi, margin)
        if np.array_equal(before, W[:, 2]):
            break
    return DroneTrajectory(getattr(traj, "dt", 0.5), W)


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------


@dataclass
class SafetyReport:
    passed: bool
    clearance: list
    violations: list  # frames below the margin
    blocked_segments: list  # i for blocked segment (i, i + 1)
    min_clearance: float
    actions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def final_safety_check(traj, bvh: Bvh, scfg: SafetyConfig | None = None) -> SafetyReport:
    scfg = SafetyConfig() if scfg is None else scfg
    W = np.asarray(getattr(traj, "waypoints", traj), dtype=float)
    clear = clearances(bvh, W)
    viol = np.nonzero(clear < scfg.hard_margin)[0].tolist()
    blocked = [i for i in range(len(W) - 1) if bvh.segment_blocked(W[i], W[i + 1])]
    return SafetyReport(
        passed=not viol and not blocked,
        clearance=[float(c) for c in np.minimum(clear, 1e9)],
        violations=viol,
        blocked_segments=blocked,
        min_clearance=float(clear.min()) if len(clear) else float("inf"),
    )
