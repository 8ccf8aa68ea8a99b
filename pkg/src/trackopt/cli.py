"""``trackopt`` command line: scenes, pedestrian paths, tracking, the A*
baseline, the comparison benchmark, augmentation and evaluation.

Exit codes: 0 success, 2 invalid input or configuration, 3 a produced
trajectory failed the final safety audit.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import benchmark as bench
from .astar import AstarParams, NoPathError
from .augment import PerturbConfig, perturb_trajectory, sample_windows, write_windows_jsonl
from .costs import CostConfig
from .geom import Aabb
from .metrics import evaluate_records, read_records, table_csv
from .optimizer import OptimizerConfig, read_trajectories_jsonl, write_trajectories_jsonl
from .pedestrian import SpeedParams, generate_path, read_paths_jsonl, write_paths_jsonl
from .safety import SafetyConfig
from .scene import ObstacleScene, SceneError, build_walkable_grid, generate_city, load_scene, save_scene, simplify_scene

CONFIG_ENV = "TRACKOPT_CONFIG"
CONFIG_SECTIONS = ("cost", "optimizer", "safety", "perturb", "astar")
EVAL_COLUMNS = ("n", "sr_at_0_5", "sr_at_1", "sr_at_2", "ade", "fde", "rot_acc", "yaw_mae", "joint_sr",
                "mae_6dof", "mae_pos", "mae_rot")

EXIT_OK, EXIT_INVALID, EXIT_UNSAFE = 0, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def load_config(path) -> dict:
    """JSON config with optional sections ``cost``, ``optimizer``, ``safety``,
    ``perturb`` and ``astar``. Falls back to ``$TRACKOPT_CONFIG``."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return data


def _section(conf: dict, name: str, overrides: dict | None = None) -> dict:
    d = dict(conf.get(name, {}))
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return d


def _build(cls, d: dict):
    if hasattr(cls, "from_dict"):
        return cls.from_dict(d)
    return cls(**d)


def configs(args) -> dict:
    conf = load_config(getattr(args, "config", None))
    out = {
        "cost": CostConfig.from_dict(_section(conf, "cost")),
        "optimizer": OptimizerConfig.from_dict(_section(conf, "optimizer", {"max_iters": getattr(args, "max_iters", None)})),
        "safety": SafetyConfig.from_dict(_section(conf, "safety")),
    }
    pert = _section(conf, "perturb", {"seed": getattr(args, "seed", None)})
    if "pos_radius" in pert:
        pert["pos_radius"] = tuple(pert["pos_radius"])
    out["perturb"] = PerturbConfig(**pert)
    out["astar"] = AstarParams(**_section(conf, "astar", {"voxel": getattr(args, "voxel", None)}))
    return out


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _empty_scene(paths) -> ObstacleScene:
    pts = np.vstack([p.points for p in paths]) if paths else np.zeros((1, 3))
    return ObstacleScene(np.zeros((0, 3)), np.zeros((0, 3)), Aabb(pts.min(axis=0) - 100, pts.max(axis=0) + 100))


def _scene_or_empty(path, paths) -> ObstacleScene:
    return load_scene(path) if path else _empty_scene(paths)


def _blocks(s: str) -> tuple[int, int]:
    try:
        a, b = s.lower().split("x")
        out = (int(a), int(b))
    except ValueError:
        raise argparse.ArgumentTypeError("expected a layout like 6x6") from None
    if min(out) < 1:
        raise argparse.ArgumentTypeError("block counts must be positive")
    return out


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, default=_json_default) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _histogram(values, bins: int = 10) -> dict:
    counts, edges = np.histogram(np.asarray(values, float), bins=bins)
    return {"counts": counts.tolist(), "edges_ms": edges.round(3).tolist()}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_scene_gen(args) -> int:
    scene = generate_city(args.seed, blocks=args.blocks)
    save_scene(scene, args.out)
    print(f"wrote {len(scene)} boxes to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_scene_simplify(args) -> int:
    scene = load_scene(args.scene)
    out = simplify_scene(scene, min_volume=args.min_volume, merge_gap=args.merge_gap, max_waste=args.max_waste)
    save_scene(out, args.out)
    print(f"{len(scene)} -> {len(out)} boxes", file=sys.stderr)
    return EXIT_OK


def cmd_paths_gen(args) -> int:
    scene = load_scene(args.scene)
    grid = build_walkable_grid(scene, args.cell_size)
    paths = []
    for k in range(args.n):
        s = args.seed + k
        paths.append(generate_path(scene, s, SpeedParams(seed=s), grid=grid, target_steps=args.steps, dt=args.dt))
    write_paths_jsonl(paths, args.out)
    mean = float(np.mean([len(p) for p in paths])) if paths else 0.0
    print(f"wrote {len(paths)} paths (mean {mean:.1f} steps) to {args.out}", file=sys.stderr)
    return EXIT_OK


def _load_paths(path):
    paths = read_paths_jsonl(path)
    if not paths:
        raise UsageError(f"no paths in {path}")
    return paths


def cmd_track_optimize(args) -> int:
    cf = configs(args)
    paths = _load_paths(args.paths)
    scene = _scene_or_empty(args.scene, paths)
    jobs = [(k, p, scene, cf["cost"], cf["optimizer"], cf["safety"], args.radius) for k, p in enumerate(paths)]
    results = bench.map_jobs(bench._muco_job, jobs, args.jobs)
    write_trajectories_jsonl(((r.path_id, r.traj, r.target, r.visibility) for r in results), args.out)
    failed = [r.path_id for r in results if not r.passed]
    report = {
        "paths": [{"path_id": r.path_id, "metrics": r.metrics, "opt": r.opt, "pipeline": r.pipeline,
                   "passed": r.passed, "unresolvable": r.unresolvable} for r in results],
        "wall_time_histogram": _histogram([r.metrics["wall_time"] for r in results]),
        "safety_failed": failed,
    }
    if args.report:
        _write_json(args.report, report)
    vis = np.mean([r.metrics["mean_visibility"] for r in results])
    print(f"{len(results)} trajectories, mean visibility {vis:.3f}, {len(failed)} safety failures", file=sys.stderr)
    return EXIT_UNSAFE if failed else EXIT_OK


def cmd_track_astar(args) -> int:
    cf = configs(args)
    paths = _load_paths(args.paths)
    scene = _scene_or_empty(args.scene, paths)
    jobs = [(k, p, scene, cf["astar"], cf["cost"], args.radius) for k, p in enumerate(paths)]
    results = bench.map_jobs(bench._astar_job, jobs, args.jobs)
    found = [r for r in results if r is not None]
    write_trajectories_jsonl(((r.path_id, r.traj, r.target, r.visibility) for r in found), args.out)
    report = {
        "paths": [{"path_id": r.path_id, "metrics": r.metrics, "stats": r.opt, "clear": r.passed} for r in found],
        "no_path": [k for k, r in enumerate(results) if r is None],
    }
    if args.report:
        _write_json(args.report, report)
    print(f"{len(found)} of {len(results)} paths planned", file=sys.stderr)
    if any(not r.passed for r in found):
        return EXIT_UNSAFE
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cf = configs(args)
    if args.scene:
        scene = load_scene(args.scene)
    else:
        scene = generate_city(args.seed, blocks=args.blocks)
    if args.paths:
        paths = _load_paths(args.paths)
    else:
        grid = build_walkable_grid(scene)
        paths = [generate_path(scene, args.seed + 1 + k, grid=grid, target_steps=args.steps) for k in range(args.n)]
    muco, astr, summary = bench.run_benchmark(paths, scene, cf["cost"], cf["optimizer"], cf["safety"], cf["astar"],
                                              args.radius, args.jobs)
    if args.backend_iters > 0:
        timing = [bench.backend_timing(p, scene, args.backend_iters, cf["cost"]) for p in paths[: args.backend_paths]]
        summary["backend"] = {
            "bvh_ms": float(sum(t["bvh"]["ms"] for t in timing)),
            "linear_ms": float(sum(t["linear"]["ms"] for t in timing)),
            "per_path_speedup": [t["speedup"] for t in timing],
        }
        summary["backend"]["speedup"] = summary["backend"]["linear_ms"] / summary["backend"]["bvh_ms"]
    table = bench.format_table(summary)
    if "backend" in summary:
        table += f"BVH vs linear-scan optimization: {summary['backend']['speedup']:.1f}x\n"
    sys.stdout.write(table)
    if args.table:
        Path(args.table).write_text(table)
    summary["per_path"] = [
        {"path_id": k, "muco": m.metrics, "astar": None if a is None else a.metrics}
        for k, (m, a) in enumerate(zip(muco, astr))
    ]
    if args.report:
        _write_json(args.report, summary)
    if args.svg_dir:
        d = Path(args.svg_dir)
        d.mkdir(parents=True, exist_ok=True)
        for m, a in zip(muco, astr):
            svg = bench.svg_topdown(scene, m.target, m.traj.waypoints, None if a is None else a.traj.waypoints)
            (d / f"scenario_{m.path_id:02d}.svg").write_text(svg)
    return EXIT_UNSAFE if summary["muco_safety_passed"] < len(muco) else EXIT_OK


def cmd_augment(args) -> int:
    cf = configs(args)
    items = read_trajectories_jsonl(args.trajectories)
    if not items:
        raise UsageError(f"no trajectories in {args.trajectories}")
    samples = []
    base = cf["perturb"]
    for k, (tid, traj, frames) in enumerate(items):
        target = np.array([f["target"] for f in frames], dtype=float)
        pcfg = PerturbConfig(base.p_pos, base.p_rot, base.pos_radius, base.rot_max, base.seed + k)
        pert = perturb_trajectory(traj, pcfg, target)
        if len(traj) < args.window:
            print(f"skipping trajectory {tid}: {len(traj)} frames < window {args.window}", file=sys.stderr)
            continue
        samples.extend(sample_windows(traj, pert.traj, target, tid, args.window, args.stride, args.n_input))
    write_windows_jsonl(samples, args.out)
    print(f"wrote {len(samples)} windows to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = read_records(args.pred)
    gt = read_records(args.gt)
    res = evaluate_records(pred, gt, args.group_by, rot_deg=args.rot_deg, joint=(args.joint_r, args.joint_d))
    _write_json(args.out, res)
    if args.csv:
        cols = list(EVAL_COLUMNS) + (["miou"] if all("miou" in r for r in res.values()) else [])
        Path(args.csv).write_text(table_csv(res, cols))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p, jobs=True):
    p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    if jobs:
        p.add_argument("--jobs", type=int, default=1, help="worker processes for per-path work (default 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trackopt", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("scene", help="scene generation and simplification").add_subparsers(dest="action", required=True)
    p = sc.add_parser("gen", help="seeded synthetic city-block scene")
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    p.add_argument("--blocks", type=_blocks, default=(6, 6), help="block layout, e.g. 6x6")
    p.add_argument("-o", "--out", required=True, help="output scene JSON")
    p.set_defaults(func=cmd_scene_gen)
    p = sc.add_parser("simplify", help="crop, prune and merge boxes")
    p.add_argument("scene", help="input scene JSON")
    p.add_argument("--min-volume", type=float, default=1.0, help="drop boxes below this volume (m^3)")
    p.add_argument("--merge-gap", type=float, default=0.5, help="merge boxes closer than this (m)")
    p.add_argument("--max-waste", type=float, default=0.10, help="max wasted fraction of a merged box")
    p.add_argument("-o", "--out", required=True, help="output scene JSON")
    p.set_defaults(func=cmd_scene_simplify)

    pg = sub.add_parser("paths", help="pedestrian paths").add_subparsers(dest="action", required=True)
    p = pg.add_parser("gen", help="timed pedestrian paths on the walkable grid")
    p.add_argument("--scene", required=True, help="scene JSON")
    p.add_argument("--n", type=int, default=20, help="number of paths")
    p.add_argument("--seed", type=int, default=0, help="seed of the first path; path k uses seed + k")
    p.add_argument("--steps", type=int, default=200, help="target path length in frames")
    p.add_argument("--dt", type=float, default=0.5, help="timestep (s)")
    p.add_argument("--cell-size", type=float, default=1.0, help="walkable grid cell (m)")
    p.add_argument("-o", "--out", required=True, help="output paths JSONL")
    p.set_defaults(func=cmd_paths_gen)

    tr = sub.add_parser("track", help="drone tracking trajectories").add_subparsers(dest="action", required=True)
    for name, func, what in (("optimize", cmd_track_optimize, "MuCO optimization plus post-processing"),
                             ("astar", cmd_track_astar, "spatiotemporal A* baseline")):
        p = tr.add_parser(name, help=what)
        p.add_argument("--paths", required=True, help="paths JSONL")
        p.add_argument("--scene", help="scene JSON (omit for an obstacle-free scene)")
        p.add_argument("--radius", type=float, default=80.0, help="per-path obstacle filter radius (m)")
        p.add_argument("-o", "--out", required=True, help="output trajectory JSONL")
        p.add_argument("--report", help="report JSON (timings and diagnostics)")
        if name == "optimize":
            p.add_argument("--max-iters", type=int, help="override optimizer max_iters")
        else:
            p.add_argument("--voxel", type=float, help="voxel edge (m), overrides config")
        _common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("benchmark", help="MuCO vs A* on shared paths")
    p.add_argument("--scene", help="scene JSON (default: generate a city from --seed)")
    p.add_argument("--paths", help="paths JSONL (default: generate --n paths)")
    p.add_argument("--seed", type=int, default=0, help="seed for generated scene and paths")
    p.add_argument("--blocks", type=_blocks, default=(6, 6), help="generated city layout")
    p.add_argument("--n", type=int, default=20, help="generated path count")
    p.add_argument("--steps", type=int, default=200, help="generated path length")
    p.add_argument("--voxel", type=float, default=1.0, help="A* voxel edge (m)")
    p.add_argument("--radius", type=float, default=80.0, help="per-path obstacle filter radius (m)")
    p.add_argument("--backend-iters", type=int, default=0,
                   help="also time BVH vs linear-scan optimization for this many iterations (0 = skip)")
    p.add_argument("--backend-paths", type=int, default=20, help="paths used for the backend timing")
    p.add_argument("--table", help="write the text table here too")
    p.add_argument("--report", help="summary JSON with per-path rows")
    p.add_argument("--svg-dir", help="write a top-down SVG per scenario")
    _common(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("augment", help="perturb expert trajectories and sample windows")
    p.add_argument("--trajectories", required=True, help="expert trajectory JSONL")
    p.add_argument("--seed", type=int, help="perturbation seed (trajectory k uses seed + k)")
    p.add_argument("--window", type=int, default=10, help="frames per window")
    p.add_argument("--stride", type=int, default=3, help="window start stride")
    p.add_argument("--n-input", type=int, default=5, help="perturbed input frames per window")
    p.add_argument("-o", "--out", required=True, help="output window JSONL")
    _common(p, jobs=False)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("eval", help="waypoint and bbox metrics for predictions")
    p.add_argument("--pred", required=True, help="prediction JSONL")
    p.add_argument("--gt", required=True, help="ground-truth JSONL")
    p.add_argument("--group-by", help="ground-truth field to stratify by")
    p.add_argument("--rot-deg", type=float, default=1.0, help="RotAcc yaw threshold (deg)")
    p.add_argument("--joint-r", type=float, default=0.5, help="JointSR radius (m)")
    p.add_argument("--joint-d", type=float, default=1.0, help="JointSR yaw threshold (deg)")
    p.add_argument("-o", "--out", default="-", help="metrics JSON (default stdout)")
    p.add_argument("--csv", help="also write a CSV table")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, SceneError, NoPathError, ValueError, TypeError, KeyError, OSError, json.JSONDecodeError) as e:
        print(f"trackopt: error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
