"""Obstacle scenes: JSON I/O, merge/crop/prune simplification, per-path
filtering, walkable ground grids and a seeded synthetic city generator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import Aabb, Bvh, boxes_to_arrays

# obstacles whose bottom lies below this height above ground block walking
GROUND_CLEARANCE = 2.0


class SceneError(ValueError):
    """Raised for malformed or unusable scene files."""


@dataclass(eq=False)
class ObstacleScene:
    box_min: np.ndarray
    box_max: np.ndarray
    bounds: Aabb
    ground_z: float = 0.0
    _bvh: Bvh | None = field(default=None, repr=False)

    def __post_init__(self):
        self.box_min = np.asarray(self.box_min, dtype=float).reshape(-1, 3)
        self.box_max = np.asarray(self.box_max, dtype=float).reshape(-1, 3)
        if self.box_min.shape != self.box_max.shape:
            raise SceneError("box_min and box_max differ in shape")
        if np.any(self.box_min > self.box_max):
            raise SceneError("degenerate box (min > max)")

    @classmethod
    def from_boxes(cls, obstacles, bounds: Aabb | None = None, ground_z: float = 0.0):
        lo, hi = boxes_to_arrays(obstacles)
        if bounds is None:
            bounds = Aabb(lo.min(axis=0), hi.max(axis=0)) if len(lo) else Aabb(np.zeros(3), np.ones(3))
        return cls(lo, hi, bounds, ground_z)

    @property
    def obstacles(self) -> list[Aabb]:
        return [Aabb(lo, hi) for lo, hi in zip(self.box_min, self.box_max)]

    def __len__(self):
        return self.box_min.shape[0]

    def bvh(self) -> Bvh:
        """Spatial index over the obstacles, built once and cached."""
        if self._bvh is None:
            self._bvh = Bvh(self.box_min, self.box_max)
        return self._bvh

    def subset(self, mask) -> "ObstacleScene":
        return ObstacleScene(self.box_min[mask], self.box_max[mask], self.bounds, self.ground_z)

    def to_dict(self) -> dict:
        return {
            "ground_z": float(self.ground_z),
            "bounds": {"min": self.bounds.min.tolist(), "max": self.bounds.max.tolist()},
            "obstacles": [
                {"min": lo.tolist(), "max": hi.tolist()} for lo, hi in zip(self.box_min, self.box_max)
            ],
        }


def _vec3(obj, what):
    if not isinstance(obj, (list, tuple)) or len(obj) != 3:
        raise SceneError(f"{what} must be a list of 3 numbers")
    try:
        v = [float(x) for x in obj]
    except (TypeError, ValueError):
        raise SceneError(f"{what} must be a list of 3 numbers") from None
    if not all(math.isfinite(x) for x in v):
        raise SceneError(f"{what} must be finite")
    return v


def scene_from_dict(data) -> ObstacleScene:
    if not isinstance(data, dict):
        raise SceneError("scene must be a JSON object")
    for key in ("bounds", "obstacles"):
        if key not in data:
            raise SceneError(f"missing key {key!r}")
    ground_z = data.get("ground_z", 0.0)
    if not isinstance(ground_z, (int, float)):
        raise SceneError("ground_z must be a number")
    b = data["bounds"]
    if not isinstance(b, dict) or "min" not in b or "max" not in b:
        raise SceneError("bounds must be an object with min and max")
    bmin, bmax = _vec3(b["min"], "bounds.min"), _vec3(b["max"], "bounds.max")
    if any(lo >= hi for lo, hi in zip(bmin, bmax)):
        raise SceneError("bounds must have min < max on every axis")
    obs = data["obstacles"]
    if not isinstance(obs, list):
        raise SceneError("obstacles must be a list")
    if not obs:
        raise SceneError("empty scene: obstacle list is empty")
    lo = np.empty((len(obs), 3))
    hi = np.empty((len(obs), 3))
    for i, o in enumerate(obs):
        if not isinstance(o, dict) or "min" not in o or "max" not in o:
            raise SceneError(f"obstacles[{i}] must be an object with min and max")
        lo[i] = _vec3(o["min"], f"obstacles[{i}].min")
        hi[i] = _vec3(o["max"], f"obstacles[{i}].max")
        if np.any(lo[i] > hi[i]):
            raise SceneError(f"obstacles[{i}] is degenerate (min > max)")
    return ObstacleScene(lo, hi, Aabb(bmin, bmax), float(ground_z))


def load_scene(path) -> ObstacleScene:
    """Read a scene JSON file; raises :class:`SceneError` on any problem."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SceneError(f"parse error: {e}") from None
    return scene_from_dict(data)


def save_scene(scene: ObstacleScene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# simplification
# ---------------------------------------------------------------------------


def _merge_boxes(lo, hi, merge_gap, max_waste):
    lo = lo.copy()
    hi = hi.copy()
    alive = np.ones(len(lo), dtype=bool)
    vol = np.prod(hi - lo, axis=1)
    changed = True
    while changed:
        changed = False
        for i in range(len(lo)):
            if not alive[i]:
                continue
            while True:
                cand = alive.copy()
                cand[i] = False
                if not cand.any():
                    break
                j_idx = np.nonzero(cand)[0]
                gap = np.maximum(np.maximum(lo[j_idx], lo[i]) - np.minimum(hi[j_idx], hi[i]), 0.0)
                ok = np.all(gap <= merge_gap, axis=1)
                if not ok.any():
                    break
                j_idx = j_idx[ok]
                ulo = np.minimum(lo[j_idx], lo[i])
                uhi = np.maximum(hi[j_idx], hi[i])
                uvol = np.prod(uhi - ulo, axis=1)
                inter = np.prod(
                    np.maximum(np.minimum(hi[j_idx], hi[i]) - np.maximum(lo[j_idx], lo[i]), 0.0), axis=1
                )
                covered = vol[i] + vol[j_idx] - inter
                waste = np.where(uvol > 0, (uvol - covered) / np.where(uvol > 0, uvol, 1.0), 0.0)
                good = waste <= max_waste
                if not good.any():
                    break
                # least wasteful partner first; lowest index on ties
                k = np.flatnonzero(good)[np.argmin(waste[good])]
                j = j_idx[k]
                lo[i], hi[i] = ulo[k], uhi[k]
                vol[i] = uvol[k]
                alive[j] = False
                changed = True
    return lo[alive], hi[alive]


def simplify_scene(
    scene: ObstacleScene,
    roi: Aabb | None = None,
    min_volume: float = 1.0,
    merge_gap: float = 0.5,
    max_waste: float = 0.10,
) -> ObstacleScene:
    """Crop to ``roi``, drop boxes smaller than ``min_volume`` and greedily merge
    near-touching boxes whose union wastes at most ``max_waste`` of its volume.

    Never increases the obstacle count. Merging can only grow the occupied set.
    """
    roi = scene.bounds if roi is None else roi
    if np.any(roi.max <= roi.min):
        raise ValueError("roi must be non-degenerate")
    lo = np.maximum(scene.box_min, roi.min)
    hi = np.minimum(scene.box_max, roi.max)
    keep = np.all(hi > lo, axis=1)
    lo, hi = lo[keep], hi[keep]
    keep = np.prod(hi - lo, axis=1) >= min_volume
    lo, hi = lo[keep], hi[keep]
    if len(lo) > 1:
        lo, hi = _merge_boxes(lo, hi, merge_gap, max_waste)
    return ObstacleScene(lo, hi, roi, scene.ground_z)


def filter_for_path(scene: ObstacleScene, path, radius: float = 80.0) -> ObstacleScene:
    """Keep only obstacles within ``radius`` of some point of ``path``.

    ``path`` is a :class:`~trackopt.pedestrian.TimedPath` or an (N, 3) array.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = np.asarray(getattr(path, "points", path), dtype=float).reshape(-1, 3)
    if len(scene) == 0 or len(pts) == 0:
        return scene.subset(np.zeros(len(scene), dtype=bool))
    keep = np.zeros(len(scene), dtype=bool)
    r2 = radius * radius
    for s in range(0, len(pts), 64):
        p = pts[s:s + 64, None, :]
        d = np.maximum(np.maximum(scene.box_min[None] - p, 0.0), p - scene.box_max[None])
        keep |= np.any(np.einsum("ijk,ijk->ij", d, d) <= r2, axis=0)
    return scene.subset(keep)


# ---------------------------------------------------------------------------
# walkable grid
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class WalkableGrid:
    cell_size: float
    origin: np.ndarray
    occupancy: np.ndarray  # (nx, ny) bool, True = walkable

    @property
    def shape(self):
        return self.occupancy.shape

    def walkable(self, cell) -> bool:
        i, j = cell
        nx, ny = self.occupancy.shape
        return 0 <= i < nx and 0 <= j < ny and bool(self.occupancy[i, j])

    def cell_center(self, cell) -> np.ndarray:
        i, j = cell
        return np.array(
            [self.origin[0] + (i + 0.5) * self.cell_size, self.origin[1] + (j + 0.5) * self.cell_size, self.origin[2]]
        )

    def cell_of(self, p) -> tuple[int, int]:
        return (
            int(math.floor((p[0] - self.origin[0]) / self.cell_size)),
            int(math.floor((p[1] - self.origin[1]) / self.cell_size)),
        )


def build_walkable_grid(scene: ObstacleScene, cell_size: float = 1.0, pedestrian_radius: float = 0.4) -> WalkableGrid:
    """Rasterize ground-level obstacle footprints, inflated by the pedestrian
    radius, onto a grid covering ``scene.bounds``. Touching edges do not count
    as overlap."""
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    b = scene.bounds
    nx = max(1, int(math.ceil((b.max[0] - b.min[0]) / cell_size)))
    ny = max(1, int(math.ceil((b.max[1] - b.min[1]) / cell_size)))
    origin = np.array([b.min[0], b.min[1], scene.ground_z])
    occ = np.ones((nx, ny), dtype=bool)
    g0, g1 = scene.ground_z, scene.ground_z + GROUND_CLEARANCE
    for lo, hi in zip(scene.box_min, scene.box_max):
        if lo[2] >= g1 or hi[2] <= g0:
            continue
        x0, x1 = lo[0] - pedestrian_radius, hi[0] + pedestrian_radius
        y0, y1 = lo[1] - pedestrian_radius, hi[1] + pedestrian_radius
        i = np.arange(max(0, int(math.floor((x0 - origin[0]) / cell_size)) - 1),
                      min(nx, int(math.ceil((x1 - origin[0]) / cell_size)) + 1))
        j = np.arange(max(0, int(math.floor((y0 - origin[1]) / cell_size)) - 1),
                      min(ny, int(math.ceil((y1 - origin[1]) / cell_size)) + 1))
        if i.size == 0 or j.size == 0:
            continue
        cx0 = origin[0] + i * cell_size
        cy0 = origin[1] + j * cell_size
        i = i[(cx0 < x1) & (cx0 + cell_size > x0)]
        j = j[(cy0 < y1) & (cy0 + cell_size > y0)]
        if i.size and j.size:
            occ[np.ix_(i, j)] = False
    return WalkableGrid(cell_size, origin, occ)


# ---------------------------------------------------------------------------
# synthetic city
# ---------------------------------------------------------------------------


def generate_city(
    seed: int = 0,
    blocks: tuple[int, int] = (6, 6),
    block_size: float = 50.0,
    street_width: float = 24.0,
    lots: int = 3,
    height_range: tuple[float, float] = (10.0, 60.0),
    tree_spacing: float = 9.0,
    furniture_per_block: int = 14,
    ceiling: float = 100.0,
) -> ObstacleScene:
    """Seeded grid of city blocks separated by streets.

    Each block holds ``lots x lots`` buildings (some with rooftop structures);
    sidewalks carry street trees (trunk plus canopy) and small street
    furniture. A 6x6 layout yields roughly two thousand boxes.
    """
    rng = np.random.default_rng(seed)
    nbx, nby = blocks
    pitch = block_size + street_width
    boxes = []
    lot = block_size / lots
    for bx in range(nbx):
        for by in range(nby):
            x0 = street_width + bx * pitch
            y0 = street_width + by * pitch
            for li in range(lots):
                for lj in range(lots):
                    inset = rng.uniform(0.5, 2.5, size=4)
                    lx0 = x0 + li * lot + inset[0]
                    lx1 = x0 + (li + 1) * lot - inset[1]
                    ly0 = y0 + lj * lot + inset[2]
                    ly1 = y0 + (lj + 1) * lot - inset[3]
                    h = rng.uniform(*height_range)
                    boxes.append(((lx0, ly0, 0.0), (lx1, ly1, h)))
                    if rng.random() < 0.5:
                        cx, cy = rng.uniform(lx0 + 2, lx1 - 4), rng.uniform(ly0 + 2, ly1 - 4)
                        boxes.append(((cx, cy, h), (cx + 2.0, cy + 2.0, h + rng.uniform(2.0, 5.0))))
            # street trees along the four block edges, 2.5 m outside the facade line
            for side in range(4):
                n_trees = int(block_size // tree_spacing)
                for k in range(n_trees):
                    if rng.random() < 0.35:
                        continue
                    s = (k + 0.5) * block_size / n_trees
                    if side == 0:
                        tx, ty = x0 + s, y0 - 2.5
                    elif side == 1:
                        tx, ty = x0 + s, y0 + block_size + 2.5
                    elif side == 2:
                        tx, ty = x0 - 2.5, y0 + s
                    else:
                        tx, ty = x0 + block_size + 2.5, y0 + s
                    top = rng.uniform(6.0, 9.0)
                    boxes.append(((tx - 0.3, ty - 0.3, 0.0), (tx + 0.3, ty + 0.3, 4.0)))
                    r = rng.uniform(1.5, 2.2)
                    boxes.append(((tx - r, ty - r, 4.0), (tx + r, ty + r, top)))
            for _ in range(furniture_per_block):
                side = rng.integers(4)
                s = rng.uniform(2.0, block_size - 2.0)
                off = rng.uniform(1.0, 4.0)
                if side == 0:
                    fx, fy = x0 + s, y0 - off
                elif side == 1:
                    fx, fy = x0 + s, y0 + block_size + off
                elif side == 2:
                    fx, fy = x0 - off, y0 + s
                else:
                    fx, fy = x0 + block_size + off, y0 + s
                w = rng.uniform(0.5, 1.2)
                boxes.append(((fx - w / 2, fy - w / 2, 0.0), (fx + w / 2, fy + w / 2, rng.uniform(2.5, 5.0))))
    lo = np.round(np.array([b[0] for b in boxes]), 3)
    hi = np.round(np.array([b[1] for b in boxes]), 3)
    extent = np.array([nbx * pitch + street_width, nby * pitch + street_width, ceiling])
    return ObstacleScene(lo, hi, Aabb(np.zeros(3), extent), 0.0)
