import io
import json

import numpy as np
import pytest

from helpers import straight_path
from trackopt.augment import (
    PerturbConfig,
    look_directions,
    perturb_trajectory,
    sample_windows,
    window_starts,
    write_windows_jsonl,
)
from trackopt.optimizer import DroneTrajectory, derive_poses


def _expert(n=60):
    path = straight_path(n)
    tr = DroneTrajectory(path.dt, path.points + [-20.0, 3.0, 20.0])
    tr.yaw, tr.pitch = derive_poses(tr, path.points)
    return tr, path.points


def test_config_validation():
    with pytest.raises(ValueError):
        PerturbConfig(p_pos=1.5)
    with pytest.raises(ValueError):
        PerturbConfig(pos_radius=(3.0, 2.0))
    with pytest.raises(ValueError):
        PerturbConfig(rot_max=0)


def test_zero_probabilities_identity():
    tr, tgt = _expert()
    out = perturb_trajectory(tr, PerturbConfig(p_pos=0, p_rot=0, seed=3), tgt)
    assert np.array_equal(out.traj.waypoints, tr.waypoints)
    assert np.allclose(out.traj.yaw, tr.yaw) and np.allclose(out.traj.pitch, tr.pitch)
    assert not out.states.any()


def test_bounds_and_flags():
    tr, tgt = _expert(400)
    out = perturb_trajectory(tr, PerturbConfig(seed=11), tgt)
    assert np.all(out.displacement <= 3.0 + 1e-12)
    assert np.all(out.angle <= 5.0 + 1e-9)
    assert np.all(out.displacement[~out.pos_flag] == 0)
    assert np.all(out.angle[~out.rot_flag] <= 1e-6)
    # stored poses describe the perturbed look direction
    back = look_directions(out.traj)
    assert np.allclose(back, out.look, atol=1e-9)


def test_seed_determinism_and_target_untouched():
    tr, tgt = _expert()
    t0 = tgt.copy()
    a = perturb_trajectory(tr, PerturbConfig(seed=5), tgt)
    b = perturb_trajectory(tr, PerturbConfig(seed=5), tgt)
    c = perturb_trajectory(tr, PerturbConfig(seed=6), tgt)
    assert np.array_equal(a.traj.waypoints, b.traj.waypoints)
    assert np.array_equal(a.traj.yaw, b.traj.yaw)
    assert not np.array_equal(a.traj.waypoints, c.traj.waypoints)
    assert np.array_equal(tgt, t0)


def test_state_frequencies_and_independence():
    tr, tgt = _expert(20_000)
    out = perturb_trajectory(tr, PerturbConfig(seed=2), tgt)
    freq = np.bincount(out.states, minlength=4) / len(tr)
    assert np.allclose(freq, [0.16, 0.24, 0.24, 0.36], atol=0.02)
    rho = np.corrcoef(out.pos_flag, out.rot_flag)[0, 1]
    assert abs(rho) < 0.03


def test_window_counts():
    assert window_starts(10) == [0]
    assert len(window_starts(200)) == 64
    assert window_starts(16) == [0, 3, 6]
    with pytest.raises(ValueError):
        window_starts(9)


def test_window_contents_match_slicing():
    tr, tgt = _expert(47)
    pert = perturb_trajectory(tr, PerturbConfig(seed=9), tgt).traj
    ws = sample_windows(tr, pert, tgt, traj_id="a")
    assert [w.start for w in ws] == list(range(0, 38, 3))
    for w in ws:
        s = w.start
        assert [f["p"] for f in w.input_frames] == pert.waypoints[s:s + 5].tolist()
        assert [f["p"] for f in w.target_frames] == tr.waypoints[s:s + 10].tolist()
        assert [f["yaw"] for f in w.input_frames] == pert.yaw[s:s + 5].tolist()
        assert w.pair["frames"] == list(range(s, s + 10))
    with pytest.raises(ValueError):
        sample_windows(tr, DroneTrajectory(0.5, tr.waypoints[:-1]), tgt)


def test_windows_jsonl():
    tr, tgt = _expert(16)
    pert = perturb_trajectory(tr, PerturbConfig(seed=1), tgt).traj
    buf = io.StringIO()
    write_windows_jsonl(sample_windows(tr, pert, tgt, traj_id=4), buf)
    rows = [json.loads(l) for l in buf.getvalue().splitlines()]
    assert len(rows) == 3
    assert set(rows[0]) == {"traj_id", "start", "input", "target", "pair"}
    assert len(rows[0]["input"]) == 5 and len(rows[0]["target"]) == 10
    assert set(rows[0]["input"][0]) == {"t", "p", "yaw", "pitch", "roll", "vis", "target"}
