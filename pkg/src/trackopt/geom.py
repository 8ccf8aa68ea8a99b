"""Axis-aligned boxes and a bounding-volume hierarchy over them.

All collision, clearance and line-of-sight queries in the package go through
:class:`Bvh`. The hot loops are numba kernels that take the packed node arrays
(``Bvh.packed``) so that other kernels (cost evaluation, voxel search) can call
them without leaving compiled code.

Conventions
-----------
* Boxes are *open* for segment tests: a segment that only grazes a face or an
  edge is not blocked.
* ``min_distance`` is the Euclidean distance to the closed box, so it is 0 on
  the surface and inside.
* An empty scene reports :data:`FREE_SPACE` as its clearance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

#: Clearance reported when there is nothing to collide with.
FREE_SPACE = 1e9

_STACK = 128


@dataclass(frozen=True, eq=False)
class Aabb:
    """Axis-aligned box given by its ``min`` and ``max`` corners (meters)."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float).reshape(3)
        hi = np.asarray(self.max, dtype=float).reshape(3)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box corners must be finite")
        if np.any(lo > hi):
            raise ValueError(f"degenerate box: min {lo.tolist()} > max {hi.tolist()}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def volume(self) -> float:
        return float(np.prod(self.max - self.min))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(self.min <= p) and np.all(p <= self.max))

    def distance(self, p) -> float:
        p = np.asarray(p, dtype=float)
        d = np.maximum(np.maximum(self.min - p, 0.0), p - self.max)
        return float(np.sqrt(d @ d))

    def __repr__(self):
        return f"Aabb(min={self.min.tolist()}, max={self.max.tolist()})"


def boxes_to_arrays(obstacles) -> tuple[np.ndarray, np.ndarray]:
    """Stack a list of :class:`Aabb` (or ``(min, max)`` pairs) into two (n, 3) arrays."""
    if len(obstacles) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    lo = np.array([np.asarray(b.min if isinstance(b, Aabb) else b[0], float) for b in obstacles])
    hi = np.array([np.asarray(b.max if isinstance(b, Aabb) else b[1], float) for b in obstacles])
    return lo.reshape(-1, 3), hi.reshape(-1, 3)


def _validate(lo, hi):
    if lo.shape != hi.shape or lo.ndim != 2 or lo.shape[1] != 3:
        raise ValueError("box arrays must both have shape (n, 3)")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("box corners must be finite")
    bad = np.nonzero(np.any(lo > hi, axis=1))[0]
    if bad.size:
        raise ValueError(f"degenerate box at index {int(bad[0])}: min > max")


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _seg_hits_open(bmin, bmax, k, a0, a1, a2, d0, d1, d2):
    # slab test against the open box; t restricted to [0, 1]
    tlo = -np.inf
    thi = np.inf
    for c in range(3):
        if c == 0:
            a, d = a0, d0
        elif c == 1:
            a, d = a1, d1
        else:
            a, d = a2, d2
        lo = bmin[k, c]
        hi = bmax[k, c]
        if d == 0.0:
            if not (lo < a < hi):
                return False
        else:
            t0 = (lo - a) / d
            t1 = (hi - a) / d
            if t0 > t1:
                t0, t1 = t1, t0
            if t0 > tlo:
                tlo = t0
            if t1 < thi:
                thi = t1
            if tlo >= thi:
                return False
    return tlo < thi and tlo < 1.0 and thi > 0.0


@njit(cache=True, inline="always")
def _point_box_dist2(bmin, bmax, k, p0, p1, p2):
    s = 0.0
    for c in range(3):
        if c == 0:
            p = p0
        elif c == 1:
            p = p1
        else:
            p = p2
        lo = bmin[k, c]
        hi = bmax[k, c]
        if p < lo:
            s += (lo - p) * (lo - p)
        elif p > hi:
            s += (p - hi) * (p - hi)
    return s


@njit(cache=True)
def segment_blocked_kernel(idx, a0, a1, a2, b0, b1, b2):
    nmin, nmax, left, right, start, count, pmin, pmax, pid = idx
    if nmin.shape[0] == 0:
        return False
    d0 = b0 - a0
    d1 = b1 - a1
    d2 = b2 - a2
    stack = np.empty(_STACK, np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if not _seg_hits_open(nmin, nmax, n, a0, a1, a2, d0, d1, d2):
            continue
        if left[n] < 0:
            s = start[n]
            for k in range(s, s + count[n]):
                if _seg_hits_open(pmin, pmax, k, a0, a1, a2, d0, d1, d2):
                    return True
        else:
            stack[sp] = left[n]
            stack[sp + 1] = right[n]
            sp += 2
    return False


@njit(cache=True)
def visible_count_kernel(idx, a0, a1, a2, b0, b1, b2, heights):
    """Number of segments from ``a`` to ``b + (0, 0, h)``, h in ``heights``, that
    no box blocks. One traversal serves the whole bundle."""
    nmin, nmax, left, right, start, count, pmin, pmax, pid = idx
    nh = heights.shape[0]
    if nmin.shape[0] == 0:
        return nh
    d0 = b0 - a0
    d1 = b1 - a1
    blocked = np.zeros(nh, np.bool_)
    free = nh
    stack = np.empty(_STACK, np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0 and free > 0:
        sp -= 1
        n = stack[sp]
        hit = False
        for r in range(nh):
            if not blocked[r] and _seg_hits_open(nmin, nmax, n, a0, a1, a2, d0, d1, b2 + heights[r] - a2):
                hit = True
                break
        if not hit:
            continue
        if left[n] < 0:
            s = start[n]
            for k in range(s, s + count[n]):
                for r in range(nh):
                    if not blocked[r] and _seg_hits_open(pmin, pmax, k, a0, a1, a2, d0, d1, b2 + heights[r] - a2):
                        blocked[r] = True
                        free -= 1
        else:
            stack[sp] = left[n]
            stack[sp + 1] = right[n]
            sp += 2
    return free


@njit(cache=True)
def nearest_kernel(idx, p0, p1, p2, cap):
    """Return (distance, original box id, node visits); distance capped at ``cap``.

    Ties in distance resolve to the lowest original box id. When nothing lies
    strictly closer than ``cap`` the id is -1.
    """
    nmin, nmax, left, right, start, count, pmin, pmax, pid = idx
    if nmin.shape[0] == 0:
        return cap, -1, 0
    best2 = cap * cap
    best_id = -1
    visits = 0
    stack = np.empty(_STACK, np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        visits += 1
        if _point_box_dist2(nmin, nmax, n, p0, p1, p2) > best2:
            continue
        if left[n] < 0:
            s = start[n]
            for k in range(s, s + count[n]):
                d2 = _point_box_dist2(pmin, pmax, k, p0, p1, p2)
                if d2 < best2 or (d2 == best2 and best_id >= 0 and pid[k] < best_id):
                    best2 = d2
                    best_id = pid[k]
        else:
            l = left[n]
            r = right[n]
            dl = _point_box_dist2(nmin, nmax, l, p0, p1, p2)
            dr = _point_box_dist2(nmin, nmax, r, p0, p1, p2)
            # push the far child first so the near one is explored first
            if dl <= dr:
                stack[sp] = r
                stack[sp + 1] = l
            else:
                stack[sp] = l
                stack[sp + 1] = r
            sp += 2
    if best_id < 0:
        return cap, -1, visits
    return math.sqrt(best2), best_id, visits


@njit(cache=True)
def min_distance_kernel(idx, p0, p1, p2, cap):
    d, _, _ = nearest_kernel(idx, p0, p1, p2, cap)
    return d


@njit(cache=True, inline="always")
def _depth_in_box(bmin, bmax, k, p0, p1, p2):
    dep = np.inf
    for c in range(3):
        if c == 0:
            p = p0
        elif c == 1:
            p = p1
        else:
            p = p2
        dep = min(dep, bmax[k, c] - p, p - bmin[k, c])
    return dep


@njit(cache=True)
def deepest_kernel(idx, p0, p1, p2):
    """Largest penetration depth over boxes containing p (closed), with its id.

    Returns (-1.0, -1) when p is outside every box. Ties go to the lowest id.
    """
    nmin, nmax, left, right, start, count, pmin, pmax, pid = idx
    best = -1.0
    best_id = -1
    if nmin.shape[0] == 0:
        return best, best_id
    stack = np.empty(_STACK, np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if _point_box_dist2(nmin, nmax, n, p0, p1, p2) > 0.0:
            continue
        if left[n] < 0:
            s = start[n]
            for k in range(s, s + count[n]):
                if _point_box_dist2(pmin, pmax, k, p0, p1, p2) == 0.0:
                    dep = _depth_in_box(pmin, pmax, k, p0, p1, p2)
                    if dep > best or (dep == best and pid[k] < best_id):
                        best = dep
                        best_id = pid[k]
        else:
            stack[sp] = left[n]
            stack[sp + 1] = right[n]
            sp += 2
    return best, best_id


@njit(cache=True)
def overlap_kernel(idx, l0, l1, l2, h0, h1, h2, out):
    """Write packed positions of boxes meeting the closed query box into ``out``; return the count."""
    nmin, nmax, left, right, start, count, pmin, pmax, pid = idx
    m = 0
    if nmin.shape[0] == 0:
        return m
    stack = np.empty(_STACK, np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if (nmin[n, 0] > h0 or nmax[n, 0] < l0 or nmin[n, 1] > h1 or nmax[n, 1] < l1
                or nmin[n, 2] > h2 or nmax[n, 2] < l2):
            continue
        if left[n] < 0:
            s = start[n]
            for k in range(s, s + count[n]):
                if not (pmin[k, 0] > h0 or pmax[k, 0] < l0 or pmin[k, 1] > h1 or pmax[k, 1] < l1
                        or pmin[k, 2] > h2 or pmax[k, 2] < l2):
                    out[m] = k
                    m += 1
        else:
            stack[sp] = left[n]
            stack[sp + 1] = right[n]
            sp += 2
    return m


@njit(cache=True)
def sub_index(idx, l0, l1, l2, h0, h1, h2):
    """Single-leaf index over the boxes meeting a query box.

    Any query confined to the query box (segments inside it, or distances
    capped so nothing outside can win) gives the same answer on the
    sub-index as on the full one.
    """
    pmin = idx[6]
    pmax = idx[7]
    pid = idx[8]
    buf = np.empty(pmin.shape[0], np.int64)
    m = overlap_kernel(idx, l0, l1, l2, h0, h1, h2, buf)
    smin = np.empty((m, 3))
    smax = np.empty((m, 3))
    sid = np.empty(m, np.int64)
    for r in range(m):
        k = buf[r]
        for c in range(3):
            smin[r, c] = pmin[k, c]
            smax[r, c] = pmax[k, c]
        sid[r] = pid[k]
    nn = 1 if m > 0 else 0
    nmin = np.empty((nn, 3))
    nmax = np.empty((nn, 3))
    if m > 0:
        for c in range(3):
            nmin[0, c] = smin[:, c].min()
            nmax[0, c] = smax[:, c].max()
    link = np.full(nn, -1, np.int64)
    st = np.zeros(nn, np.int64)
    cnt = np.full(nn, m, np.int64)
    return (nmin, nmax, link, link.copy(), st, cnt, smin, smax, sid)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _build_nodes(lo, hi, leaf_size):
    n = lo.shape[0]
    cent = 0.5 * (lo + hi)
    order = []
    nmin, nmax, left, right, start, count = [], [], [], [], [], []

    def new_node(ids):
        k = len(nmin)
        nmin.append(lo[ids].min(axis=0))
        nmax.append(hi[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return k

    root_ids = np.arange(n)
    root = new_node(root_ids)
    todo = [(root, root_ids)]
    while todo:
        k, ids = todo.pop()
        if len(ids) <= leaf_size:
            start[k] = len(order)
            count[k] = len(ids)
            order.extend(ids.tolist())
            continue
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = ids[np.argsort(c[:, axis], kind="stable")]
        mid = len(srt) // 2
        lk = new_node(srt[:mid])
        rk = new_node(srt[mid:])
        left[k] = lk
        right[k] = rk
        # right pushed first so the left subtree is laid out first
        todo.append((rk, srt[mid:]))
        todo.append((lk, srt[:mid]))
    order = np.asarray(order, dtype=np.int64)
    return (
        np.asarray(nmin, dtype=float).reshape(-1, 3),
        np.asarray(nmax, dtype=float).reshape(-1, 3),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(start, dtype=np.int64),
        np.asarray(count, dtype=np.int64),
        order,
    )


class Bvh:
    """Immutable bounding-volume hierarchy over axis-aligned boxes.

    Internal nodes split at the median box centroid along the longest axis of
    the centroid bounds; leaves hold at most ``leaf_size`` boxes. Passing
    ``leaf_size=None`` puts every box in a single leaf, which turns each query
    into a plain linear scan (same kernels, no pruning).
    """

    def __init__(self, box_min, box_max, leaf_size: int | None = 4):
        lo = np.ascontiguousarray(np.asarray(box_min, dtype=float).reshape(-1, 3))
        hi = np.ascontiguousarray(np.asarray(box_max, dtype=float).reshape(-1, 3))
        _validate(lo, hi)
        self.box_min = lo
        self.box_max = hi
        self.n_boxes = lo.shape[0]
        if self.n_boxes == 0:
            z3 = np.zeros((0, 3))
            zi = np.zeros(0, dtype=np.int64)
            self.packed = (z3, z3, zi, zi, zi, zi, z3, z3, zi)
            self.n_nodes = 0
            self.leaf_size = leaf_size
            return
        if leaf_size is None:
            leaf_size = self.n_boxes
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        self.leaf_size = leaf_size
        nmin, nmax, left, right, start, count, order = _build_nodes(lo, hi, leaf_size)
        self.n_nodes = nmin.shape[0]
        self.packed = (
            nmin, nmax, left, right, start, count,
            np.ascontiguousarray(lo[order]), np.ascontiguousarray(hi[order]), order,
        )
        for a in self.packed:
            a.setflags(write=False)

    @classmethod
    def linear(cls, box_min, box_max) -> "Bvh":
        """Single-leaf index: every query scans all boxes."""
        return cls(box_min, box_max, leaf_size=None)

    # -- structure ---------------------------------------------------------
    def leaves(self) -> list[np.ndarray]:
        """Original box ids held by each leaf, in node order."""
        _, _, left, _, start, count, _, _, pid = self.packed
        return [pid[start[n]:start[n] + count[n]] for n in range(self.n_nodes) if left[n] < 0]

    def nodes(self):
        """Yield ``(node_min, node_max, left, right)`` for each node."""
        nmin, nmax, left, right = self.packed[:4]
        for n in range(self.n_nodes):
            yield nmin[n], nmax[n], int(left[n]), int(right[n])

    # -- queries -----------------------------------------------------------
    def segment_blocked(self, a, b) -> bool:
        """True iff segment ``[a, b]`` passes through the interior of some box."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return bool(segment_blocked_kernel(self.packed, a[0], a[1], a[2], b[0], b[1], b[2]))

    def min_distance(self, p) -> float:
        """Distance from ``p`` to the nearest box (0 inside, ``FREE_SPACE`` if empty)."""
        p = np.asarray(p, dtype=float)
        return float(min_distance_kernel(self.packed, p[0], p[1], p[2], FREE_SPACE))

    def nearest(self, p) -> tuple[float, int]:
        p = np.asarray(p, dtype=float)
        d, k, _ = nearest_kernel(self.packed, p[0], p[1], p[2], FREE_SPACE)
        return float(d), int(k)

    def query_visits(self, p) -> int:
        """Node visits spent by a ``min_distance`` query (for cost audits)."""
        p = np.asarray(p, dtype=float)
        return int(nearest_kernel(self.packed, p[0], p[1], p[2], FREE_SPACE)[2])

    def penetration_depth(self, p) -> float:
        """Deepest penetration of ``p`` into any box; 0 when outside or on a surface."""
        p = np.asarray(p, dtype=float)
        dep, _ = deepest_kernel(self.packed, p[0], p[1], p[2])
        return max(float(dep), 0.0)

    def signed_distance(self, p) -> float:
        """Clearance outside, minus the deepest penetration inside."""
        d = self.min_distance(p)
        if d > 0.0:
            return d
        return -self.penetration_depth(p)

    def distance_gradient(self, p) -> np.ndarray:
        """Unit direction of increasing clearance at ``p``.

        Outside every box this is the normalized offset from the nearest box
        point (ties: lowest box id). Inside, it is the outward normal of the
        nearest face of the deepest containing box, faces ranked
        ``+x, -x, +y, -y, +z, -z`` on ties. Zero only for an empty scene.
        """
        p = np.asarray(p, dtype=float)
        if self.n_boxes == 0:
            return np.zeros(3)
        d, k, _ = nearest_kernel(self.packed, p[0], p[1], p[2], FREE_SPACE)
        if d > 0.0:
            q = np.clip(p, self.box_min[k], self.box_max[k])
            v = p - q
            return v / np.linalg.norm(v)
        _, k = deepest_kernel(self.packed, p[0], p[1], p[2])
        return inward_face_normal(self.box_min[k], self.box_max[k], p)

    @property
    def is_linear(self) -> bool:
        """True when the index has no internal nodes, so queries scan every box."""
        return self.n_nodes <= 1

    def __len__(self):
        return self.n_boxes

    def __repr__(self):
        return f"Bvh(n_boxes={self.n_boxes}, n_nodes={self.n_nodes})"


def inward_face_normal(lo, hi, p) -> np.ndarray:
    """Outward normal of the face of box ``[lo, hi]`` nearest to an interior point."""
    faces = (hi[0] - p[0], p[0] - lo[0], hi[1] - p[1], p[1] - lo[1], hi[2] - p[2], p[2] - lo[2])
    j = int(np.argmin(faces))  # argmin keeps the first minimum: x before y before z, + before -
    out = np.zeros(3)
    out[j // 2] = 1.0 if j % 2 == 0 else -1.0
    return out


def build_bvh(obstacles, leaf_size: int = 4) -> Bvh:
    """Build a :class:`Bvh` from a list of :class:`Aabb` or from ``(mins, maxs)`` arrays."""
    if isinstance(obstacles, tuple) and len(obstacles) == 2 and np.ndim(obstacles[0]) == 2:
        lo, hi = obstacles
    else:
        lo, hi = boxes_to_arrays(obstacles)
    return Bvh(lo, hi, leaf_size=leaf_size)
