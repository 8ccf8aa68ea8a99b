import json

import numpy as np
import pytest

from helpers import naive_eval, oracle_blocked, random_boxes
from trackopt.costs import build_context
from trackopt.geom import Bvh, build_bvh
from trackopt.metrics import (
    bbox_miou,
    box_iou,
    evaluate_records,
    read_records,
    table_csv,
    traj_metrics,
    waypoint_eval,
    wrap_deg,
)

EMPTY = build_bvh([])


def test_traj_metrics_trivial():
    tgt = np.zeros((10, 3))
    ctx = build_context(tgt)
    W = np.tile([28.0, 0, 0], (10, 1))
    m = traj_metrics(W, ctx, EMPTY)
    assert (m.mean_visibility, m.mean_track_dist, m.path_length, m.mean_jerk) == (1.0, 28.0, 0.0, 0.0)
    W = np.column_stack([np.arange(10) * 3.0, np.zeros(10), np.full(10, 20.0)])
    assert traj_metrics(W, ctx, EMPTY).mean_jerk == 0.0


def test_traj_metrics_naive_recompute(rng):
    lo, hi = random_boxes(rng, 30, extent=80.0)
    bvh = Bvh(lo, hi)
    tgt = np.cumsum(rng.normal(0, 0.7, (25, 3)), axis=0) + [40, 40, 0]
    tgt[:, 2] = 0
    ctx = build_context(tgt)
    W = tgt + rng.normal(0, 5, tgt.shape) + [0, -15, 20]
    m = traj_metrics(W, ctx, bvh, 12.5)
    vis = [np.mean([not oracle_blocked(lo, hi, W[i], s) for s in ctx.body_samples(i)]) for i in range(25)]
    jerk = [np.linalg.norm(W[i + 3] - 3 * W[i + 2] + 3 * W[i + 1] - W[i]) for i in range(22)]
    assert m.mean_visibility == pytest.approx(np.mean(vis), rel=1e-12)
    assert m.mean_track_dist == pytest.approx(np.mean([np.linalg.norm(W[i] - tgt[i]) for i in range(25)]), rel=1e-12)
    assert m.path_length == pytest.approx(sum(np.linalg.norm(W[i + 1] - W[i]) for i in range(24)), rel=1e-12)
    assert m.mean_jerk == pytest.approx(np.mean(jerk), rel=1e-12)
    assert m.wall_time == 12.5
    assert m.max_speed == pytest.approx(max(np.linalg.norm(W[i + 1] - W[i]) for i in range(24)) / 0.5)


def test_perfect_prediction():
    G = np.random.default_rng(0).normal(size=(20, 10, 6))
    ev = waypoint_eval(G, G)
    assert (ev.sr_at_0_5, ev.sr_at_2, ev.rot_acc, ev.joint_sr) == (100, 100, 100, 100)
    assert ev.ade == ev.fde == ev.mae_6dof == ev.yaw_mae == 0


def test_predict_zero_construction():
    G = np.zeros((100, 4, 6))
    G[:75, :, 0] = 0.5  # 2 m total for 75 samples
    G[75:, :, 1] = 0.1  # 0.4 m for the rest
    ev = waypoint_eval(np.zeros_like(G), G)
    assert ev.sr_at_1 == 25.0


def test_random_pairs_match_naive():
    rng = np.random.default_rng(42)
    for _ in range(5):
        P = rng.normal(0, 0.4, (40, 8, 6))
        G = P + rng.normal(0, 0.25, P.shape)
        G[:, :, 3:] = rng.uniform(-200, 200, (40, 8, 3))
        ev = waypoint_eval(P, G).to_dict()
        ref = naive_eval(P, G)
        for k, v in ref.items():
            assert ev[k] == pytest.approx(v, rel=1e-9, abs=1e-9), k


def test_properties():
    rng = np.random.default_rng(3)
    P = rng.normal(0, 0.5, (200, 6, 6))
    G = rng.normal(0, 0.5, (200, 6, 6))
    ev = waypoint_eval(P, G, joint=(1.0, 30.0), rot_deg=30.0)
    assert ev.sr_at_0_5 <= ev.sr_at_1 <= ev.sr_at_2
    assert ev.joint_sr <= min(ev.sr_at_1, ev.rot_acc)
    assert ev.fde >= 0
    # yaw metrics ignore whole turns
    P2 = P.copy()
    P2[:, 2, 4] += 360.0
    P2[:, 4, 4] -= 720.0
    ev2 = waypoint_eval(P2, G, joint=(1.0, 30.0), rot_deg=30.0)
    assert ev2.yaw_mae == pytest.approx(ev.yaw_mae, abs=1e-9)
    assert ev2.rot_acc == ev.rot_acc
    assert ev2.mae_6dof == pytest.approx(ev.mae_6dof, abs=1e-9)


def test_shape_errors():
    with pytest.raises(ValueError):
        waypoint_eval(np.zeros((3, 2, 6)), np.zeros((3, 3, 6)))
    with pytest.raises(ValueError):
        waypoint_eval(np.zeros((3, 2, 5)), np.zeros((3, 2, 5)))
    with pytest.raises(ValueError):
        waypoint_eval(np.zeros((0, 2, 6)), np.zeros((0, 2, 6)))


def test_wrap():
    assert wrap_deg(180.0) == -180.0
    assert wrap_deg(-181.0) == 179.0
    assert wrap_deg(725.0) == 5.0


def test_iou():
    assert box_iou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert box_iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert box_iou([0, 0, 1, 1], [1, 0, 2, 1]) == 0.0
    assert box_iou([0, 0, 1, 1], [0.5, 0, 1.5, 1]) == pytest.approx(1 / 3)
    assert bbox_miou([[0, 0, 1, 1], [0, 0, 1, 1]], [[0, 0, 1, 1], [5, 5, 6, 6]]) == 0.5
    with pytest.raises(ValueError):
        bbox_miou([[0, 0, 1, 1]], [])


def test_records_and_groups(tmp_path):
    gt = tmp_path / "gt.jsonl"
    pr = tmp_path / "pr.jsonl"
    rows_gt = [{"id": i, "deltas": [[1.0 * i, 0, 0, 0, 0, 0]] * 2, "group": "a" if i < 2 else "b",
                "bbox": [0, 0, 1, 1]} for i in range(4)]
    rows_pr = [{"id": i, "deltas": [[1.0 * i, 0, 0, 0, 0, 0]] * 2, "bbox": [0, 0, 1, 1]} for i in range(4)]
    gt.write_text("\n".join(json.dumps(r) for r in rows_gt))
    pr.write_text("\n".join(json.dumps(r) for r in rows_pr))
    res = evaluate_records(read_records(pr), read_records(gt), "group")
    assert set(res) == {"all", "a", "b"}
    assert res["all"]["sr_at_0_5"] == 100.0 and res["a"]["n"] == 2 and res["all"]["miou"] == 1.0
    csv = table_csv(res, ["sr_at_1", "ade", "n"])
    assert csv.splitlines()[0] == "name,sr_at_1,ade,n"
    with pytest.raises(ValueError):
        evaluate_records({}, read_records(gt))
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": 1}\n')
    with pytest.raises(ValueError):
        read_records(bad)
