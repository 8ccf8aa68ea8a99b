"""MuCO vs the voxel A* baseline on a few paths, with top-down SVGs.

    python demos/compare_astar.py [n_paths] [voxel] [out_dir]

A 1 m voxel matches the acceptance benchmark but takes 5-70 s per path;
the default 2 m voxel finishes in a few seconds.
"""
import sys
from pathlib import Path

from trackopt.astar import AstarParams
from trackopt.benchmark import format_table, run_benchmark, svg_topdown
from trackopt.pedestrian import generate_path
from trackopt.scene import generate_city


def main(n: int = 3, voxel: float = 2.0, out: str = "demo_svg"):
    city = generate_city(0)
    paths = [generate_path(city, s, target_steps=200) for s in range(1, n + 1)]
    muco, astr, summary = run_benchmark(paths, city, params=AstarParams(voxel=voxel))
    print(format_table(summary))
    d = Path(out)
    d.mkdir(exist_ok=True)
    for m, a in zip(muco, astr):
        svg = svg_topdown(city, m.target, m.traj.waypoints, None if a is None else a.traj.waypoints)
        (d / f"scenario_{m.path_id:02d}.svg").write_text(svg)
    print(f"wrote {len(muco)} SVGs to {d}/")


if __name__ == "__main__":
    a = sys.argv[1:]
    main(int(a[0]) if a else 3, float(a[1]) if len(a) > 1 else 2.0, a[2] if len(a) > 2 else "demo_svg")
