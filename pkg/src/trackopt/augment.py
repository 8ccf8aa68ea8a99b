"""Dual-trajectory augmentation: Bernoulli pose perturbations of expert
trajectories and the sliding-window sampler that pairs them."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optimizer import DroneTrajectory, derive_poses, look_angles

STATE_NAMES = ("none", "position", "rotation", "both")


@dataclass
class PerturbConfig:
    p_pos: float = 0.6
    p_rot: float = 0.6
    pos_radius: tuple = (2.0, 3.0)
    rot_max: float = 5.0  # degrees
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_pos <= 1.0 and 0.0 <= self.p_rot <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        lo, hi = self.pos_radius
        if not 0 < lo <= hi:
            raise ValueError("pos_radius must be a positive (low, high) range")
        if self.rot_max <= 0:
            raise ValueError("rot_max must be positive")


@dataclass(eq=False)
class Perturbation:
    traj: DroneTrajectory
    look: np.ndarray  # (N, 3) unit look directions after perturbation
    pos_flag: np.ndarray  # (N,) bool
    rot_flag: np.ndarray
    displacement: np.ndarray  # (N,) meters
    angle: np.ndarray  # (N,) degrees between expert and perturbed look direction

    @property
    def states(self) -> np.ndarray:
        """0 none, 1 position only, 2 rotation only, 3 both."""
        return self.pos_flag.astype(int) + 2 * self.rot_flag.astype(int)


def look_directions(traj: DroneTrajectory, target=None) -> np.ndarray:
    """Unit look vectors, toward ``target`` if given, else from stored yaw/pitch."""
    if target is not None:
        d = np.asarray(target, float) - traj.waypoints
        return d / np.linalg.norm(d, axis=1, keepdims=True)
    if traj.yaw is None or traj.pitch is None:
        raise ValueError("trajectory has no poses; pass target points")
    yaw = np.radians(traj.yaw)
    pit = np.radians(traj.pitch)
    return np.column_stack([np.cos(pit) * np.sin(yaw), np.cos(pit) * np.cos(yaw), -np.sin(pit)])


def random_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def rotate_toward_random(look, angles_rad, rng):
    """Rotate each unit vector by its angle about a random axis perpendicular to it."""
    a = random_unit(rng, len(look))
    a -= np.einsum("ij,ij->i", a, look)[:, None] * look
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    # a is perpendicular to look, so rotating about look x a tilts look toward a
    c = np.cos(angles_rad)[:, None]
    s = np.sin(angles_rad)[:, None]
    out = c * look + s * a
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def perturb_trajectory(expert: DroneTrajectory, cfg: PerturbConfig | None = None, target=None) -> Perturbation:
    """Independent position and rotation perturbations per frame.

    Position: uniform direction, magnitude uniform in ``[0, r]`` with
    ``r ~ U(pos_radius)``. Rotation: the look direction tilts by an angle
    uniform in ``[0, rot_max]`` about a random perpendicular axis. Yaw and
    pitch are re-derived from the resulting look direction. The target path
    is never touched, and perturbed positions are not re-projected for safety.
    """
    cfg = PerturbConfig() if cfg is None else cfg
    rng = np.random.default_rng(cfg.seed)
    n = len(expert)
    look = look_directions(expert, target)
    bpos = rng.random(n) < cfg.p_pos
    brot = rng.random(n) < cfg.p_rot
    radius = rng.uniform(cfg.pos_radius[0], cfg.pos_radius[1], n)
    mag = rng.uniform(0.0, 1.0, n) * radius
    dirs = random_unit(rng, n)
    ang = np.radians(rng.uniform(0.0, cfg.rot_max, n))
    tilted = rotate_toward_random(look, ang, rng)
    W = expert.waypoints + np.where(bpos, mag, 0.0)[:, None] * dirs
    new_look = np.where(brot[:, None], tilted, look)
    out = DroneTrajectory(expert.dt, W)
    yaw = np.empty(n)
    pitch = np.empty(n)
    prev = 0.0
    for i in range(n):
        prev, pitch[i] = look_angles(W[i], W[i] + new_look[i], prev)
        yaw[i] = prev
    out.yaw, out.pitch = yaw, pitch
    cosang = np.clip(np.einsum("ij,ij->i", new_look, look), -1.0, 1.0)
    return Perturbation(out, new_look, bpos, brot, np.linalg.norm(W - expert.waypoints, axis=1), np.degrees(np.arccos(cosang)))


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass
class WindowSample:
    traj_id: object
    start: int
    input_frames: list  # 5 perturbed frames
    target_frames: list  # 10 expert frames
    pair: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "traj_id": self.traj_id,
            "start": self.start,
            "input": self.input_frames,
            "target": self.target_frames,
            "pair": self.pair,
        }


def window_starts(n: int, window: int = 10, stride: int = 3) -> list[int]:
    if n < window:
        raise ValueError(f"need at least {window} frames, got {n}")
    return list(range(0, n - window + 1, stride))


def _frames(traj: DroneTrajectory, target, vis=None) -> list[dict]:
    if traj.yaw is None or traj.pitch is None:
        if target is None:
            raise ValueError("trajectory has no poses; pass target points")
        traj.yaw, traj.pitch = derive_poses(traj, target)
    out = []
    for i, w in enumerate(traj.waypoints):
        out.append({
            "t": round(i * traj.dt, 9),
            "p": [float(x) for x in w],
            "yaw": float(traj.yaw[i]),
            "pitch": float(traj.pitch[i]),
            "roll": 0.0,
            "vis": None if vis is None else float(vis[i]),
            "target": None if target is None else [float(x) for x in target[i]],
        })
    return out


def sample_windows(expert: DroneTrajectory, perturbed: DroneTrajectory, target=None, traj_id=0,
                   window: int = 10, stride: int = 3, n_input: int = 5) -> list[WindowSample]:
    """Windows of ``window`` expert frames, the first ``n_input`` of which are
    also given as perturbed observations. Starts are 0, stride, 2*stride, ..."""
    if len(expert) != len(perturbed):
        raise ValueError("expert and perturbed trajectories differ in length")
    starts = window_starts(len(expert), window, stride)
    target = None if target is None else np.asarray(getattr(target, "points", target), dtype=float)
    ef = _frames(expert, target)
    pf = _frames(perturbed, target)
    out = []
    for s in starts:
        out.append(WindowSample(
            traj_id, s, pf[s:s + n_input], ef[s:s + window],
            {"input": "perturbed", "target": "expert", "frames": list(range(s, s + window))},
        ))
    return out


def write_windows_jsonl(samples, fp) -> None:
    close = False
    if isinstance(fp, (str, Path)):
        fp = open(fp, "w")
        close = True
    try:
        for s in samples:
            fp.write(json.dumps(s.to_json()) + "\n")
    finally:
        if close:
            fp.close()
