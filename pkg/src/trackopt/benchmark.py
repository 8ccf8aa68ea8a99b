"""Per-path tracking pipeline and the MuCO vs A* comparison harness."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .astar import AstarParams, NoPathError, astar_plan
from .costs import CostConfig, CostModel, build_context
from .geom import Bvh
from .metrics import traj_metrics
from .optimizer import OptimizerConfig, descend, init_trajectory, optimize
from .postprocess import run_pipeline
from .safety import SafetyConfig, clearances
from .scene import ObstacleScene, filter_for_path

TABLE_COLUMNS = ("mean_visibility", "mean_track_dist", "path_length", "wall_time", "expansions")
HEADERS = ("Visibility", "Track Dist. (m)", "Path Len. (m)", "Time (ms)", "Expansions")


@dataclass
class TrackResult:
    path_id: int
    traj: object
    target: np.ndarray
    visibility: np.ndarray
    opt: dict
    pipeline: dict
    metrics: dict
    passed: bool
    unresolvable: list = field(default_factory=list)


def track_path(path, scene: ObstacleScene, cfg: CostConfig | None = None, ocfg: OptimizerConfig | None = None,
               scfg: SafetyConfig | None = None, radius: float = 80.0, path_id: int = 0) -> TrackResult:
    """filter_for_path, init, optimize and post-process one pedestrian path."""
    cfg = CostConfig() if cfg is None else cfg
    t0 = time.perf_counter()
    local = filter_for_path(scene, path, radius)
    bvh = local.bvh()
    ctx = build_context(path)
    traj, rep = optimize(path, bvh, cfg, ocfg, ctx=ctx)
    traj, prep = run_pipeline(traj, ctx, local, cfg, scfg)
    wall = (time.perf_counter() - t0) * 1e3
    vis = CostModel(ctx, bvh, cfg).visibility(traj.waypoints)
    m = traj_metrics(traj, ctx, bvh, wall).to_dict()
    m["n_boxes"] = len(local)
    m["expansions"] = 0
    return TrackResult(path_id, traj, ctx.target, vis, rep.to_dict(), prep.to_dict(), m, prep.passed, prep.unresolvable)


def astar_path(path, scene: ObstacleScene, params: AstarParams | None = None, cfg: CostConfig | None = None,
               radius: float = 80.0, path_id: int = 0) -> TrackResult:
    """The voxel baseline on the same filtered scene."""
    t0 = time.perf_counter()
    local = filter_for_path(scene, path, radius)
    bvh = local.bvh()
    ctx = build_context(path)
    traj, st = astar_plan(path, local, params, cfg)
    wall = (time.perf_counter() - t0) * 1e3
    vis = CostModel(ctx, bvh, cfg).visibility(traj.waypoints)
    m = traj_metrics(traj, ctx, bvh, wall).to_dict()
    m["n_boxes"] = len(local)
    m["expansions"] = st.expansions
    ok = bool(np.all(clearances(bvh, traj.waypoints) >= (params or AstarParams()).hard_margin))
    return TrackResult(path_id, traj, ctx.target, vis, st.to_dict(), {}, m, ok)


def _mean_row(rows) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) for k in TABLE_COLUMNS}


def summarize(muco_rows, astar_rows) -> dict:
    """Mean rows, the delta row (percent change of MuCO relative to A*) and the speedup."""
    mu = _mean_row(muco_rows)
    astr = _mean_row(astar_rows)
    delta = {}
    for k in ("mean_visibility", "mean_track_dist", "path_length"):
        delta[k] = 100.0 * (mu[k] - astr[k]) / astr[k] if astr[k] else float("nan")
    speedup = astr["wall_time"] / mu["wall_time"] if mu["wall_time"] > 0 else float("inf")
    delta["wall_time"] = speedup
    delta["expansions"] = float("nan")
    vis = np.array([r["mean_visibility"] for r in muco_rows])
    return {
        "astar": astr,
        "muco": mu,
        "delta": delta,
        "speedup": speedup,
        "n_paths": len(muco_rows),
        "muco_paths_above_0_9": int(np.sum(vis > 0.90)),
    }


def format_table(summary: dict) -> str:
    """Plain-text comparison table: A*, MuCO, then the delta row."""
    w = 16
    lines = ["Method".ljust(8) + "".join(h.rjust(w) for h in HEADERS)]
    for name, key in (("A*", "astar"), ("MuCO", "muco")):
        r = summary[key]
        cells = [f"{r['mean_visibility']:.3f}", f"{r['mean_track_dist']:.2f}", f"{r['path_length']:.1f}",
                 f"{r['wall_time']:.0f}", f"{r['expansions']:.0f}" if key == "astar" else "-"]
        lines.append(name.ljust(8) + "".join(c.rjust(w) for c in cells))
    d = summary["delta"]
    cells = [f"{d['mean_visibility']:+.1f}%", f"{d['mean_track_dist']:+.1f}%", f"{d['path_length']:+.1f}%",
             f"{d['wall_time']:.1f}x faster", "-"]
    lines.append("Delta".ljust(8) + "".join(c.rjust(w) for c in cells))
    lines.append(f"speedup (A* time / MuCO time): {summary['speedup']:.1f}x over {summary['n_paths']} paths; "
                 f"MuCO visibility > 0.90 on {summary['muco_paths_above_0_9']} of {summary['n_paths']}")
    return "\n".join(lines) + "\n"


def run_benchmark(paths, scene: ObstacleScene, cfg=None, ocfg=None, scfg=None, params=None, radius: float = 80.0,
                  jobs: int = 1, progress=None):
    """Both planners on the same paths and filtered scenes.

    Returns ``(muco_results, astar_results, summary)``. A* failures are kept
    out of the means and reported by id in ``summary["astar_failed"]``.
    """
    muco = map_jobs(_muco_job, [(k, p, scene, cfg, ocfg, scfg, radius) for k, p in enumerate(paths)], jobs)
    astr = map_jobs(_astar_job, [(k, p, scene, params, cfg, radius) for k, p in enumerate(paths)], jobs)
    ok = [k for k, r in enumerate(astr) if r is not None]
    summary = summarize([muco[k].metrics for k in ok], [astr[k].metrics for k in ok])
    summary["astar_failed"] = [k for k, r in enumerate(astr) if r is None]
    summary["muco_safety_passed"] = int(sum(r.passed for r in muco))
    if progress is not None:
        progress(summary)
    return muco, astr, summary


def _muco_job(args):
    k, p, scene, cfg, ocfg, scfg, radius = args
    return track_path(p, scene, cfg, ocfg, scfg, radius, path_id=k)


def _astar_job(args):
    k, p, scene, params, cfg, radius = args
    try:
        return astar_path(p, scene, params, cfg, radius, path_id=k)
    except NoPathError:
        return None


def map_jobs(fn, items, jobs: int = 1) -> list:
    """Ordered map, in worker processes when ``jobs > 1``."""
    if jobs <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# spatial index speedup
# ---------------------------------------------------------------------------


def backend_timing(path, scene: ObstacleScene, iters: int = 30, cfg: CostConfig | None = None) -> dict:
    """Wall time of the same capped optimization with the BVH and with a linear scan.

    Both runs use the full scene, the same initial trajectory and exactly
    ``iters`` descent iterations (early stop disabled), so the work differs
    only in the spatial index.
    """
    cfg = CostConfig() if cfg is None else cfg
    ctx = build_context(path)
    bvh = Bvh(scene.box_min, scene.box_max)
    lin = Bvh.linear(scene.box_min, scene.box_max)
    ocfg = OptimizerConfig(max_iters=iters, early_stop_tol=0.0)
    W0 = init_trajectory(path, ctx, bvh, cfg, ocfg).waypoints
    out = {}
    for name, idx in (("bvh", bvh), ("linear", lin)):
        model = CostModel(ctx, idx, cfg)
        t0 = time.perf_counter()
        W, rep = descend(model, W0, ocfg)
        out[name] = {"ms": (time.perf_counter() - t0) * 1e3, "final_cost": rep.final_cost, "iterations": rep.iterations}
    out["speedup"] = out["linear"]["ms"] / out["bvh"]["ms"]
    out["n_boxes"] = len(scene)
    return out


# ---------------------------------------------------------------------------
# top-down plots
# ---------------------------------------------------------------------------


def svg_topdown(scene: ObstacleScene, target, muco_W, astar_W=None, size: int = 600) -> str:
    """Top-down view: obstacle footprints, dashed pedestrian path, both drone tracks."""
    pts = [np.asarray(target)[:, :2], np.asarray(muco_W)[:, :2]]
    if astar_W is not None:
        pts.append(np.asarray(astar_W)[:, :2])
    allp = np.vstack(pts)
    lo = allp.min(axis=0) - 20.0
    hi = allp.max(axis=0) + 20.0
    s = size / float(max(hi - lo))

    def xy(p):
        return (p[0] - lo[0]) * s, size - (p[1] - lo[1]) * s

    def poly(P, style):
        d = " ".join(f"{x:.1f},{y:.1f}" for x, y in (xy(p) for p in P))
        return f'<polyline points="{d}" fill="none" {style}/>'

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    for bmin, bmax in zip(scene.box_min, scene.box_max):
        if bmax[0] < lo[0] or bmin[0] > hi[0] or bmax[1] < lo[1] or bmin[1] > hi[1]:
            continue
        x0, y1 = xy(bmin)
        x1, y0 = xy(bmax)
        out.append(f'<rect x="{x0:.1f}" y="{y0:.1f}" width="{x1 - x0:.1f}" height="{y1 - y0:.1f}" fill="#ccc" stroke="#999"/>')
    out.append(poly(target, 'stroke="black" stroke-width="1.5" stroke-dasharray="6,4"'))
    if astar_W is not None:
        out.append(poly(astar_W, 'stroke="#d62728" stroke-width="1.5"'))
    out.append(poly(muco_W, 'stroke="#1f77b4" stroke-width="2"'))
    out.append('<text x="8" y="18" font-size="13" font-family="sans-serif">'
               '<tspan fill="#1f77b4">MuCO</tspan>  <tspan fill="#d62728">A*</tspan>  pedestrian (dashed)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
