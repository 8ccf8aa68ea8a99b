"""Track one pedestrian through a synthetic city and print the metrics.

    python demos/track_one_path.py [seed]
"""
import sys

import numpy as np

from trackopt.benchmark import track_path
from trackopt.pedestrian import generate_path
from trackopt.safety import final_safety_check
from trackopt.scene import generate_city


def main(seed: int = 9):
    city = generate_city(0)
    path = generate_path(city, seed, target_steps=181)
    r = track_path(path, city)
    print(f"{len(city)} boxes in the city, {r.metrics['n_boxes']} near the path")
    print(f"{len(path)} frames, optimizer stopped after {r.opt['iterations']} iterations ({r.opt['stop_reason']})")
    for k in ("mean_visibility", "mean_track_dist", "path_length", "max_speed", "wall_time"):
        print(f"  {k:16s} {r.metrics[k]:10.3f}")
    print("pipeline steps:", ", ".join(s["step"] for s in r.pipeline["steps"]))
    ok = final_safety_check(r.traj, city.bvh()).passed
    print("safe against the full scene:", ok)
    low = np.flatnonzero(r.visibility < 0.5)
    print(f"frames with visibility < 0.5: {len(low)}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 9)
