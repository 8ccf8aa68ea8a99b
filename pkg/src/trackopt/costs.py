"""The nine tracking cost terms, the per-frame tracking context and the total
weighted objective.

Terms are split by what they touch. *Point* terms (track, safe, vis, view,
pitch and the altitude band) depend on a single waypoint. *Stencil* terms
(smooth, jerk, altitude oscillation, length) couple up to four consecutive
waypoints. A term whose stencil would run off either end of the trajectory
contributes nothing there.

Scalar functions (``c_track`` ...) are the readable reference; the numba
kernels further down compute the same quantities for the optimizer.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from numba import njit

from .geom import Bvh, min_distance_kernel, sub_index, visible_count_kernel

TERMS = ("track", "smooth", "jerk", "safe", "vis", "view", "pitch", "alt", "len")


@dataclass
class CostConfig:
    """Term weights and physical constants of the tracking objective."""

    track: float = 1.0
    smooth: float = 0.5
    jerk: float = 0.3
    safe: float = 2.0
    vis: float = 3.0
    view: float = 1.0
    pitch: float = 0.5
    alt: float = 1.0
    len: float = 0.1
    d_opt: float = 28.0
    d_inf: float = 8.0
    h_min: float = 20.0
    h_pref: float = 20.0
    target_pitch: float = 45.0
    # altitude band and oscillation strengths
    k_low: float = 1.0
    k_high: float = 0.05
    k_osc: float = 0.5

    def __post_init__(self):
        if any(getattr(self, k) < 0 for k in TERMS):
            raise ValueError("cost weights must be non-negative")
        if self.d_opt <= 0 or self.d_inf <= 0:
            raise ValueError("d_opt and d_inf must be positive")

    def weights(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in TERMS], dtype=float)

    def params(self) -> np.ndarray:
        return np.array(
            [self.d_opt, self.d_inf, self.h_min, self.h_pref, self.target_pitch, self.k_low, self.k_high, self.k_osc]
        )

    def with_weights(self, **kw) -> "CostConfig":
        d = asdict(self)
        d.update(kw)
        return CostConfig(**d)

    def only(self, *terms) -> "CostConfig":
        """Copy with every weight zeroed except ``terms``."""
        return self.with_weights(**{k: (getattr(self, k) if k in terms else 0.0) for k in TERMS})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CostConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown cost config keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CostConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# tracking context
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TrackContext:
    target: np.ndarray  # (N, 3)
    walk_dir: np.ndarray  # (N, 3) unit or zero
    directness: np.ndarray  # (N,) in [0, 1]
    body_heights: np.ndarray  # (K,) offsets above the target's feet

    def __len__(self):
        return self.target.shape[0]

    def body_samples(self, i: int) -> np.ndarray:
        pts = np.repeat(self.target[i][None], len(self.body_heights), axis=0)
        pts[:, 2] += self.body_heights
        return pts


def build_context(path, window: int = 15, body_sample_count: int = 8, body_height: float = 1.7) -> TrackContext:
    """Walking direction and directness from net displacement over a +/- ``window``
    frame span, plus a vertical stack of body sample heights."""
    pts = np.asarray(getattr(path, "points", path), dtype=float).reshape(-1, 3)
    n = len(pts)
    if not 5 <= body_sample_count <= 10:
        raise ValueError("body_sample_count must be between 5 and 10")
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    walk = np.zeros((n, 3))
    direct = np.zeros(n)
    for i in range(n):
        lo, hi = max(i - window, 0), min(i + window, n - 1)
        net = pts[hi] - pts[lo]
        dist = float(np.linalg.norm(net))
        length = arc[hi] - arc[lo]
        if dist >= 1e-6:
            walk[i] = net / dist
        if length >= 1e-6:
            direct[i] = min(max(dist / length, 0.0), 1.0)
    heights = np.linspace(0.0, body_height, body_sample_count)
    return TrackContext(pts.copy(), walk, direct, heights)


# ---------------------------------------------------------------------------
# scalar reference terms
# ---------------------------------------------------------------------------


def c_track(w, p, cfg: CostConfig = CostConfig()) -> float:
    return (float(np.linalg.norm(np.subtract(w, p))) - cfg.d_opt) ** 2


def c_smooth(w_prev, w, w_next) -> float:
    a = np.asarray(w_next, float) - 2.0 * np.asarray(w, float) + np.asarray(w_prev, float)
    return float(a @ a)


def c_jerk(w0, w1, w2, w3) -> float:
    """Squared third difference of waypoints ``w_{i-1}, w_i, w_{i+1}, w_{i+2}``."""
    j = np.asarray(w3, float) - 3.0 * np.asarray(w2, float) + 3.0 * np.asarray(w1, float) - np.asarray(w0, float)
    return float(j @ j)


def c_safe(w, bvh: Bvh, cfg: CostConfig = CostConfig()) -> float:
    d = bvh.min_distance(w)
    return 0.5 * (cfg.d_inf - d) ** 2 if d < cfg.d_inf else 0.0


def visibility_fraction(w, samples, bvh: Bvh) -> float:
    """Share of body sample points with an unblocked line of sight from ``w``."""
    samples = np.asarray(samples, dtype=float).reshape(-1, 3)
    free = sum(not bvh.segment_blocked(w, s) for s in samples)
    return free / len(samples)


def c_vis(v: float) -> float:
    return (1.0 - v) ** 2


def view_alignment(c: float) -> float:
    """Zero when looking along the walking direction from behind, one from the front."""
    return ((1.0 + c) / 2.0) ** 2


def c_view(w, i: int, ctx: TrackContext) -> float:
    wd = ctx.walk_dir[i]
    if not np.any(wd):
        return 0.0
    r = np.asarray(w, float) - ctx.target[i]
    nr = float(np.linalg.norm(r))
    c = 0.0 if nr == 0.0 else float(r @ wd) / (nr * float(np.linalg.norm(wd)))
    return view_alignment(c) * float(ctx.directness[i])


def pitch_deg(w, p) -> float:
    r = np.asarray(w, float) - np.asarray(p, float)
    return math.degrees(math.atan2(r[2], math.hypot(r[0], r[1])))


def c_pitch(w, p, cfg: CostConfig = CostConfig()) -> float:
    th = pitch_deg(w, p)
    hi, lo = cfg.target_pitch + 15.0, cfg.target_pitch - 15.0
    if th > hi:
        return 0.5 * (th - hi) ** 2
    if th < lo:
        return 0.2 * (lo - th) ** 2
    return 0.02 * (th - cfg.target_pitch) ** 2


def c_alt(w_prev, w, w_next, cfg: CostConfig = CostConfig(), ground: float = 0.0) -> float:
    """Altitude band penalty plus an oscillation penalty when the climb rate
    flips sign around ``w``. Either neighbor may be ``None`` at the ends."""
    z = float(w[2]) - ground
    c = 0.0
    if z < cfg.h_min:
        c += cfg.k_low * (cfg.h_min - z) ** 2
    if z > cfg.h_pref:
        c += cfg.k_high * (z - cfg.h_pref) ** 2
    if w_prev is not None and w_next is not None:
        dz1 = float(w[2]) - float(w_prev[2])
        dz2 = float(w_next[2]) - float(w[2])
        if dz1 * dz2 < 0.0:
            c += cfg.k_osc * abs(dz1 * dz2)
    return c


def c_len(w_prev, w) -> float:
    return 0.1 * float(np.linalg.norm(np.subtract(w, w_prev)))


@dataclass
class CostBreakdown:
    """Raw (unweighted) per-term sums and the weighted total."""

    track: float = 0.0
    smooth: float = 0.0
    jerk: float = 0.0
    safe: float = 0.0
    vis: float = 0.0
    view: float = 0.0
    pitch: float = 0.0
    alt: float = 0.0
    len: float = 0.0
    total: float = 0.0

    def terms(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in TERMS])

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------
# prm layout: d_opt, d_inf, h_min, h_pref, target_pitch, k_low, k_high, k_osc


@njit(cache=True)
def visibility_kernel(idx, w0, w1, w2, p0, p1, p2, heights):
    return visible_count_kernel(idx, w0, w1, w2, p0, p1, p2, heights) / heights.shape[0]


@njit(cache=True)
def point_terms_kernel(idx, w0, w1, w2, i, target, walk, direct, heights, prm):
    """(track, safe, vis, view, pitch, alt_band) for waypoint w at frame i."""
    p0 = target[i, 0]
    p1 = target[i, 1]
    p2 = target[i, 2]
    r0 = w0 - p0
    r1 = w1 - p1
    r2 = w2 - p2
    nr = math.sqrt(r0 * r0 + r1 * r1 + r2 * r2)
    d_opt = prm[0]
    d_inf = prm[1]
    track = (nr - d_opt) * (nr - d_opt)

    d = min_distance_kernel(idx, w0, w1, w2, d_inf)
    safe = 0.5 * (d_inf - d) * (d_inf - d) if d < d_inf else 0.0

    v = visibility_kernel(idx, w0, w1, w2, p0, p1, p2, heights)
    vis = (1.0 - v) * (1.0 - v)

    wd0 = walk[i, 0]
    wd1 = walk[i, 1]
    wd2 = walk[i, 2]
    nw = math.sqrt(wd0 * wd0 + wd1 * wd1 + wd2 * wd2)
    view = 0.0
    if nw > 0.0:
        c = 0.0
        if nr > 0.0:
            c = (r0 * wd0 + r1 * wd1 + r2 * wd2) / (nr * nw)
        f = (1.0 + c) / 2.0
        view = f * f * direct[i]

    th = math.degrees(math.atan2(r2, math.sqrt(r0 * r0 + r1 * r1)))
    tp = prm[4]
    if th > tp + 15.0:
        pitch = 0.5 * (th - tp - 15.0) ** 2
    elif th < tp - 15.0:
        pitch = 0.2 * (tp - 15.0 - th) ** 2
    else:
        pitch = 0.02 * (th - tp) ** 2

    alt = 0.0
    if r2 < prm[2]:
        alt += prm[5] * (prm[2] - r2) ** 2
    if r2 > prm[3]:
        alt += prm[6] * (r2 - prm[3]) ** 2
    return track, safe, vis, view, pitch, alt


@njit(cache=True)
def stencil_terms_kernel(W, i, prm):
    """(smooth, jerk, alt_osc, len) assigned to frame i; zero where a neighbor is missing."""
    n = W.shape[0]
    smooth = 0.0
    jerk = 0.0
    osc = 0.0
    ln = 0.0
    if 1 <= i <= n - 2:
        for c in range(3):
            a = W[i + 1, c] - 2.0 * W[i, c] + W[i - 1, c]
            smooth += a * a
        dz1 = W[i, 2] - W[i - 1, 2]
        dz2 = W[i + 1, 2] - W[i, 2]
        if dz1 * dz2 < 0.0:
            osc = prm[7] * abs(dz1 * dz2)
    if 1 <= i <= n - 3:
        for c in range(3):
            j = W[i + 2, c] - 3.0 * W[i + 1, c] + 3.0 * W[i, c] - W[i - 1, c]
            jerk += j * j
    if i >= 1:
        s = 0.0
        for c in range(3):
            s += (W[i, c] - W[i - 1, c]) ** 2
        ln = 0.1 * math.sqrt(s)
    return smooth, jerk, osc, ln


@njit(cache=True)
def weighted_point_kernel(idx, W, i, target, walk, direct, heights, prm, lam):
    track, safe, vis, view, pitch, alt = point_terms_kernel(
        idx, W[i, 0], W[i, 1], W[i, 2], i, target, walk, direct, heights, prm
    )
    return (lam[0] * track + lam[3] * safe + lam[4] * vis + lam[5] * view + lam[6] * pitch + lam[7] * alt)


@njit(cache=True)
def weighted_stencil_kernel(W, i, prm, lam):
    smooth, jerk, osc, ln = stencil_terms_kernel(W, i, prm)
    return lam[1] * smooth + lam[2] * jerk + lam[7] * osc + lam[8] * ln


@njit(cache=True)
def terms_kernel(idx, W, target, walk, direct, heights, prm):
    """Raw per-term sums over the whole trajectory, in TERMS order."""
    out = np.zeros(9)
    for i in range(W.shape[0]):
        track, safe, vis, view, pitch, alt = point_terms_kernel(
            idx, W[i, 0], W[i, 1], W[i, 2], i, target, walk, direct, heights, prm
        )
        smooth, jerk, osc, ln = stencil_terms_kernel(W, i, prm)
        out[0] += track
        out[1] += smooth
        out[2] += jerk
        out[3] += safe
        out[4] += vis
        out[5] += view
        out[6] += pitch
        out[7] += alt + osc
        out[8] += ln
    return out


@njit(cache=True)
def total_kernel(idx, W, target, walk, direct, heights, prm, lam):
    tot = 0.0
    for i in range(W.shape[0]):
        tot += weighted_point_kernel(idx, W, i, target, walk, direct, heights, prm, lam)
        tot += weighted_stencil_kernel(W, i, prm, lam)
    return tot


@njit(cache=True)
def _local_cost(idx, W, j, target, walk, direct, heights, prm, lam):
    # every term that reads w_j: its own point terms and stencils at j-2 .. j+1
    n = W.shape[0]
    c = weighted_point_kernel(idx, W, j, target, walk, direct, heights, prm, lam)
    for i in range(max(j - 2, 0), min(j + 2, n)):
        c += weighted_stencil_kernel(W, i, prm, lam)
    return c


@njit(cache=True)
def gradient_kernel(idx, W, eps, target, walk, direct, heights, prm, lam):
    """Central differences, re-evaluating only the terms that read w_j."""
    n = W.shape[0]
    Wc = W.copy()
    g = np.zeros((n, 3))
    for j in range(n):
        for c in range(3):
            orig = Wc[j, c]
            Wc[j, c] = orig + eps
            plus = _local_cost(idx, Wc, j, target, walk, direct, heights, prm, lam)
            Wc[j, c] = orig - eps
            minus = _local_cost(idx, Wc, j, target, walk, direct, heights, prm, lam)
            Wc[j, c] = orig
            g[j, c] = (plus - minus) / (2.0 * eps)
    return g


@njit(cache=True)
def culled_gradient_kernel(idx, W, eps, target, walk, direct, heights, prm, lam):
    """Same values as ``gradient_kernel``.

    Each frame first gathers the boxes that any of its perturbed evaluations
    could touch: sight lines to the body samples and distances up to d_inf.
    """
    n = W.shape[0]
    Wc = W.copy()
    g = np.zeros((n, 3))
    reach = eps + prm[1]
    htop = heights.max()
    hbot = heights.min()
    for j in range(n):
        lo0 = min(W[j, 0] - reach, target[j, 0])
        lo1 = min(W[j, 1] - reach, target[j, 1])
        lo2 = min(W[j, 2] - reach, target[j, 2] + hbot)
        hi0 = max(W[j, 0] + reach, target[j, 0])
        hi1 = max(W[j, 1] + reach, target[j, 1])
        hi2 = max(W[j, 2] + reach, target[j, 2] + htop)
        sub = sub_index(idx, lo0, lo1, lo2, hi0, hi1, hi2)
        for c in range(3):
            orig = Wc[j, c]
            Wc[j, c] = orig + eps
            plus = _local_cost(sub, Wc, j, target, walk, direct, heights, prm, lam)
            Wc[j, c] = orig - eps
            minus = _local_cost(sub, Wc, j, target, walk, direct, heights, prm, lam)
            Wc[j, c] = orig
            g[j, c] = (plus - minus) / (2.0 * eps)
    return g


@njit(cache=True)
def full_gradient_kernel(idx, W, eps, target, walk, direct, heights, prm, lam):
    """Central differences of the full objective (reference for the local version)."""
    n = W.shape[0]
    Wc = W.copy()
    g = np.zeros((n, 3))
    for j in range(n):
        for c in range(3):
            orig = Wc[j, c]
            Wc[j, c] = orig + eps
            plus = total_kernel(idx, Wc, target, walk, direct, heights, prm, lam)
            Wc[j, c] = orig - eps
            minus = total_kernel(idx, Wc, target, walk, direct, heights, prm, lam)
            Wc[j, c] = orig
            g[j, c] = (plus - minus) / (2.0 * eps)
    return g


@njit(cache=True)
def batch_point_kernel(idx, P, i, target, walk, direct, heights, prm, lam):
    """Weighted point cost, visibility and clearance for candidate positions at frame i."""
    m = P.shape[0]
    cost = np.empty(m)
    vis = np.empty(m)
    clear = np.empty(m)
    for k in range(m):
        track, safe, cv, view, pitch, alt = point_terms_kernel(
            idx, P[k, 0], P[k, 1], P[k, 2], i, target, walk, direct, heights, prm
        )
        cost[k] = lam[0] * track + lam[3] * safe + lam[4] * cv + lam[5] * view + lam[6] * pitch + lam[7] * alt
        vis[k] = visibility_kernel(idx, P[k, 0], P[k, 1], P[k, 2], target[i, 0], target[i, 1], target[i, 2], heights)
        clear[k] = min_distance_kernel(idx, P[k, 0], P[k, 1], P[k, 2], 1e9)
    return cost, vis, clear


@njit(cache=True)
def frame_visibility_kernel(idx, W, target, heights):
    out = np.empty(W.shape[0])
    for i in range(W.shape[0]):
        out[i] = visibility_kernel(idx, W[i, 0], W[i, 1], W[i, 2], target[i, 0], target[i, 1], target[i, 2], heights)
    return out


@njit(cache=True)
def clearance_kernel(idx, W):
    out = np.empty(W.shape[0])
    for i in range(W.shape[0]):
        out[i] = min_distance_kernel(idx, W[i, 0], W[i, 1], W[i, 2], 1e9)
    return out


# ---------------------------------------------------------------------------
# public evaluation surface
# ---------------------------------------------------------------------------


class CostModel:
    """Binds a tracking context, an obstacle index and a config for repeated
    evaluation of the objective on (N, 3) waypoint arrays."""

    def __init__(self, ctx: TrackContext, bvh: Bvh, cfg: CostConfig | None = None):
        self.ctx = ctx
        self.bvh = bvh
        self.cfg = CostConfig() if cfg is None else cfg
        self.prm = self.cfg.params()
        self.lam = self.cfg.weights()
        self._args = (
            np.ascontiguousarray(ctx.target, dtype=float),
            np.ascontiguousarray(ctx.walk_dir, dtype=float),
            np.ascontiguousarray(ctx.directness, dtype=float),
            np.ascontiguousarray(ctx.body_heights, dtype=float),
        )

    def _w(self, W):
        W = np.ascontiguousarray(W, dtype=float)
        if W.shape != (len(self.ctx), 3):
            raise ValueError(f"trajectory has shape {W.shape}, context expects ({len(self.ctx)}, 3)")
        return W

    def total(self, W) -> float:
        return float(total_kernel(self.bvh.packed, self._w(W), *self._args, self.prm, self.lam))

    def breakdown(self, W) -> CostBreakdown:
        raw = terms_kernel(self.bvh.packed, self._w(W), *self._args, self.prm)
        return CostBreakdown(*[float(x) for x in raw], total=float(raw @ self.lam))

    def gradient(self, W, eps: float = 0.5) -> np.ndarray:
        # the linear index is kept a plain scan so backend comparisons stay honest
        kern = gradient_kernel if self.bvh.is_linear else culled_gradient_kernel
        return kern(self.bvh.packed, self._w(W), float(eps), *self._args, self.prm, self.lam)

    def full_gradient(self, W, eps: float = 0.5) -> np.ndarray:
        return full_gradient_kernel(self.bvh.packed, self._w(W), float(eps), *self._args, self.prm, self.lam)

    def candidates(self, P, i: int):
        """(weighted point cost, visibility, clearance) of candidate positions for frame ``i``."""
        P = np.ascontiguousarray(np.asarray(P, dtype=float).reshape(-1, 3))
        return batch_point_kernel(self.bvh.packed, P, int(i), *self._args, self.prm, self.lam)

    def visibility(self, W) -> np.ndarray:
        return frame_visibility_kernel(self.bvh.packed, self._w(W), self._args[0], self._args[3])

    def clearance(self, W) -> np.ndarray:
        return clearance_kernel(self.bvh.packed, np.ascontiguousarray(W, dtype=float))


def total_cost(traj, ctx: TrackContext, bvh: Bvh, cfg: CostConfig | None = None) -> CostBreakdown:
    """Weighted objective with per-term raw sums.

    ``traj`` is a :class:`~trackopt.optimizer.DroneTrajectory` or an (N, 3) array.
    """
    W = np.asarray(getattr(traj, "waypoints", traj), dtype=float)
    if W.ndim != 2 or W.shape[1] != 3:
        raise ValueError("trajectory must be an (N, 3) array")
    if len(W) != len(ctx):
        raise ValueError(f"length mismatch: trajectory {len(W)} vs context {len(ctx)}")
    if len(W) < 4:
        raise ValueError("total_cost needs at least 4 waypoints")
    return CostModel(ctx, bvh, cfg).breakdown(W)
