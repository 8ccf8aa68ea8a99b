import math

import numpy as np
import pytest

from helpers import oracle_dijkstra, oracle_distance, straight_path
from trackopt.astar import AstarParams, NoPathError, VoxelGrid, astar_plan, neighbor_moves, plan_cost
from trackopt.costs import CostModel, build_context
from trackopt.geom import Aabb, build_bvh

EMPTY = build_bvh([])


def test_params_validation():
    with pytest.raises(ValueError):
        AstarParams(voxel=0)
    with pytest.raises(ValueError):
        AstarParams(heuristic="greedy")
    with pytest.raises(ValueError):
        AstarParams(track_form="cubic")


def test_neighbor_moves():
    mv, ln = neighbor_moves(1.0, 15.0, 0.5)
    assert len(mv) == 27 and ln.min() == 0.0
    mv, ln = neighbor_moves(2.0, 2.5, 1.0)  # only hover and axis moves fit
    assert len(mv) == 7


def test_empty_scene_straight_path():
    path = straight_path(30)
    traj, st = astar_plan(path, EMPTY, AstarParams(voxel=2.0))
    assert st.found and len(traj.waypoints) == len(path)
    assert np.all(CostModel(build_context(path), EMPTY).visibility(traj.waypoints) == 1.0)
    d = np.linalg.norm(traj.waypoints - path.points, axis=1)
    assert abs(d.mean() - 28.0) <= 2.0 * math.sqrt(3)


@pytest.mark.parametrize("heuristic", ["admissible", "zero"])
def test_small_instances_match_dijkstra(heuristic):
    rng = np.random.default_rng(7)
    for _ in range(4):
        lo = rng.uniform(0, 8, (3, 3))
        lo[:, 2] = 0
        hi = lo + rng.uniform(0.5, 2.5, (3, 3))
        bvh = build_bvh([Aabb(a, b) for a, b in zip(lo, hi)])
        pts = np.column_stack([np.linspace(2, 6, 6), np.full(6, 4.0), np.zeros(6)])
        grid = VoxelGrid(np.array([-1.0, -1.0, 0.0]), 1.0, (10, 10, 8))
        assert grid.n * len(pts) <= 10_000
        params = AstarParams(voxel=1.0, v_max=4.0, d_opt=4.0, hard_margin=0.6, heuristic=heuristic)
        traj, st = astar_plan((pts), bvh, params, grid=grid)
        heights = build_context(pts).body_heights
        moves, move_len = neighbor_moves(1.0, 4.0, 0.5)
        start = grid.index_of(traj.waypoints[0])
        ref = oracle_dijkstra(lo, hi, pts, heights, grid, start, moves, move_len,
                               params.lam_vis, params.lam_track, params.d_opt, params.hard_margin)
        assert st.cost == pytest.approx(ref, rel=1e-9)
        assert plan_cost(traj.waypoints, pts, bvh, params) == pytest.approx(st.cost, rel=1e-9)


def test_hard_margin_and_time_monotonicity(small_city):
    from trackopt.pedestrian import generate_path
    from trackopt.scene import filter_for_path

    path = generate_path(small_city, 3, target_steps=40)
    local = filter_for_path(small_city, path, 80)
    params = AstarParams(voxel=2.0)
    traj, st = astar_plan(path, local, params)
    assert len(traj.waypoints) == len(path)  # one state per frame
    bvh = local.bvh()
    for w in traj.waypoints:
        assert oracle_distance(bvh.box_min, bvh.box_max, w) >= params.hard_margin
    steps = np.abs(np.diff(traj.waypoints, axis=0))
    assert np.all(steps <= params.voxel + 1e-9)
    assert st.expansions > 0 and st.open_peak > 0


def test_blocked_corridor_raises():
    # the whole grid sits inside one box
    big = build_bvh([Aabb([-500, -500, -10], [500, 500, 500])])
    with pytest.raises(NoPathError):
        astar_plan(straight_path(5), big, AstarParams(voxel=4.0))
