"""Trajectory quality metrics and waypoint-prediction evaluation."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .costs import CostModel, TrackContext
from .geom import Bvh

# 6-DoF delta layout (dx, dy, dz, dpitch, dyaw, droll)
POS = slice(0, 3)
ROT = slice(3, 6)
YAW = 4


@dataclass
class TrajMetrics:
    mean_visibility: float
    mean_track_dist: float
    path_length: float
    mean_jerk: float
    wall_time: float  # ms, as measured by the caller
    max_speed: float

    def to_dict(self) -> dict:
        return asdict(self)


def third_differences(W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if len(W) < 4:
        return np.zeros((0, W.shape[1] if W.ndim == 2 else 3))
    return W[3:] - 3.0 * W[2:-1] + 3.0 * W[1:-2] - W[:-3]


def traj_metrics(traj, ctx: TrackContext, bvh: Bvh, wall_ms: float = 0.0) -> TrajMetrics:
    W = np.asarray(getattr(traj, "waypoints", traj), dtype=float)
    dt = float(getattr(traj, "dt", 0.5))
    vis = CostModel(ctx, bvh).visibility(W)
    steps = np.linalg.norm(np.diff(W, axis=0), axis=1)
    jerk = np.linalg.norm(third_differences(W), axis=1)
    return TrajMetrics(
        mean_visibility=float(vis.mean()),
        mean_track_dist=float(np.linalg.norm(W - ctx.target, axis=1).mean()),
        path_length=float(steps.sum()),
        mean_jerk=float(jerk.mean()) if len(jerk) else 0.0,
        wall_time=float(wall_ms),
        max_speed=float(steps.max() / dt) if len(steps) else 0.0,
    )


# ---------------------------------------------------------------------------
# waypoint predictions
# ---------------------------------------------------------------------------


def wrap_deg(a):
    """Wrap angles to [-180, 180)."""
    return (np.asarray(a, dtype=float) + 180.0) % 360.0 - 180.0


@dataclass
class WaypointEval:
    sr_at_0_5: float
    sr_at_1: float
    sr_at_2: float
    ade: float
    fde: float
    rot_acc: float  # percent of final yaw errors within rot_deg
    yaw_mae: float
    joint_sr: float
    mae_6dof: float
    mae_pos: float
    mae_rot: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _as_deltas(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 2:
        a = a[:, None, :]
    if a.ndim != 3 or a.shape[2] != 6:
        raise ValueError("deltas must have shape (samples, steps, 6)")
    return a


def waypoint_eval(pred, gt, rot_deg: float = 1.0, joint: tuple = (0.5, 1.0), yaw_index: int = YAW) -> WaypointEval:
    """Evaluate predicted 6-DoF increments against ground truth.

    Both inputs are (samples, steps, 6) arrays of per-step deltas. Deltas are
    summed into positions and yaw relative to the start before distance
    metrics are taken. Position errors are 3-D, and yaw errors are wrapped
    circular differences. MAE averages the raw delta channels, with rotation
    channels wrapped.
    """
    P = _as_deltas(pred)
    G = _as_deltas(gt)
    if P.shape != G.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {G.shape}")
    if P.shape[0] == 0 or P.shape[1] == 0:
        raise ValueError("empty evaluation set")
    pos_err = np.linalg.norm(np.cumsum(P[:, :, POS], axis=1) - np.cumsum(G[:, :, POS], axis=1), axis=2)
    yaw_err = np.abs(wrap_deg(np.cumsum(P[:, :, yaw_index], axis=1) - np.cumsum(G[:, :, yaw_index], axis=1)))
    fin = pos_err[:, -1]
    fyaw = yaw_err[:, -1]
    diff = np.abs(P - G)
    diff[:, :, ROT] = np.abs(wrap_deg(P[:, :, ROT] - G[:, :, ROT]))
    r_j, d_j = joint
    return WaypointEval(
        sr_at_0_5=100.0 * float(np.mean(fin <= 0.5)),
        sr_at_1=100.0 * float(np.mean(fin <= 1.0)),
        sr_at_2=100.0 * float(np.mean(fin <= 2.0)),
        ade=float(pos_err.mean()),
        fde=float(fin.mean()),
        rot_acc=100.0 * float(np.mean(fyaw <= rot_deg)),
        yaw_mae=float(yaw_err.mean()),
        joint_sr=100.0 * float(np.mean((fin <= r_j) & (fyaw <= d_j))),
        mae_6dof=float(diff.mean()),
        mae_pos=float(diff[:, :, POS].mean()),
        mae_rot=float(diff[:, :, ROT].mean()),
        n=int(P.shape[0]),
    )


def box_iou(a, b) -> float:
    """IoU of two ``[x1, y1, x2, y2]`` boxes; 0 when they do not overlap."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def bbox_miou(pred_boxes, gt_boxes) -> float:
    pred_boxes = np.asarray(pred_boxes, dtype=float).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError("box lists differ in length")
    if len(pred_boxes) == 0:
        raise ValueError("no boxes to evaluate")
    return float(np.mean([box_iou(a, b) for a, b in zip(pred_boxes, gt_boxes)]))


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def read_records(path) -> dict:
    """JSONL of ``{"id", "deltas": [[6 floats], ...], "bbox"?: [4], "group"?: str}`` keyed by id."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if "id" not in rec or "deltas" not in rec:
            raise ValueError(f"{path}:{n}: record needs 'id' and 'deltas'")
        out[rec["id"]] = rec
    return out


def evaluate_records(pred: dict, gt: dict, group_key: str | None = None, **kw) -> dict:
    """Metrics overall and per group (groups read from the ground-truth records)."""
    missing = set(gt) - set(pred)
    if missing:
        raise ValueError(f"{len(missing)} ground-truth ids have no prediction")
    groups = defaultdict(list)
    for k in sorted(gt, key=str):
        groups["all"].append(k)
        if group_key is not None:
            groups[str(gt[k].get(group_key, "none"))].append(k)
    result = {}
    for g, ids in groups.items():
        ev = waypoint_eval([pred[k]["deltas"] for k in ids], [gt[k]["deltas"] for k in ids], **kw).to_dict()
        boxed = [k for k in ids if "bbox" in pred[k] and "bbox" in gt[k]]
        if boxed:
            ev["miou"] = bbox_miou([pred[k]["bbox"] for k in boxed], [gt[k]["bbox"] for k in boxed])
        result[g] = ev
    return result


def table_csv(rows: dict, columns) -> str:
    """Aligned CSV: one row per key of ``rows``, given metric columns."""
    lines = ["name," + ",".join(columns)]
    for name, r in rows.items():
        lines.append(name + "," + ",".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in columns))
    return "\n".join(lines) + "\n"
