"""Point-to-mesh distance and ray casting over a median-split AABB tree.

The numba kernels operate on the flattened tree arrays; the Python wrappers
take :class:`TriangleMesh` / :class:`Bvh` values and never mutate them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numba
import numpy as np

_STACK = 128


class EmptyMeshError(ValueError):
    pass


class DegenerateGradientError(ArithmeticError):
    """Distance gradient requested at zero distance."""


class TriangleMesh:
    def __init__(self, vertices, triangles):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (n, 3), got {self.vertices.shape}")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError(f"triangles must be (m, 3), got {self.triangles.shape}")
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        self.vertices.flags.writeable = False
        self.triangles.flags.writeable = False

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def corners(self) -> np.ndarray:
        """(m, 3, 3) triangle corner positions."""
        return self.vertices[self.triangles]

    @cached_property
    def normals(self) -> np.ndarray:
        c = self.corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, length, out=np.zeros_like(n), where=length > 0)

    @cached_property
    def areas(self) -> np.ndarray:
        c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def write_obj(self, path) -> None:
        lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.triangles]
        Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


@dataclass(frozen=True)
class SurfacePoint:
    triangle_id: int
    barycentric: np.ndarray
    position: np.ndarray
    distance: float


@dataclass(frozen=True)
class Hit:
    t: float
    triangle_id: int
    front_facing: bool


@dataclass(frozen=True)
class Bvh:
    lo: np.ndarray  # (K, 3) node box minima
    hi: np.ndarray  # (K, 3) node box maxima
    left: np.ndarray  # (K,) child index, -1 at leaves
    right: np.ndarray
    start: np.ndarray  # (K,) offset into ``order`` for leaves
    count: np.ndarray  # (K,) triangle count for leaves, 0 for inner nodes
    order: np.ndarray  # (m,) triangle ids grouped by leaf
    leaf_size: int

    @property
    def n_nodes(self) -> int:
        return self.lo.shape[0]

    def depth(self) -> int:
        best, stack = 0, [(0, 1)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.left[node] >= 0:
                stack += [(self.left[node], d + 1), (self.right[node], d + 1)]
        return best

    def leaves(self):
        return [i for i in range(self.n_nodes) if self.left[i] < 0]

    def arrays(self):
        return self.lo, self.hi, self.left, self.right, self.start, self.count, self.order


@numba.njit(cache=True)
def _build_kernel(tri_lo, tri_hi, cent, leaf_size):
    m = cent.shape[0]
    cap = 2 * m + 1
    lo = np.empty((cap, 3))
    hi = np.empty((cap, 3))
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    start = np.zeros(cap, np.int64)
    count = np.zeros(cap, np.int64)
    order = np.arange(m)
    # work stack of (node, begin, end)
    stack = np.empty((cap, 3), np.int64)
    sp = 0
    stack[sp, 0] = 0
    stack[sp, 1] = 0
    stack[sp, 2] = m
    sp += 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        b = stack[sp, 1]
        e = stack[sp, 2]
        for k in range(3):
            lo[node, k] = np.inf
            hi[node, k] = -np.inf
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for i in range(b, e):
            t = order[i]
            for k in range(3):
                lo[node, k] = min(lo[node, k], tri_lo[t, k])
                hi[node, k] = max(hi[node, k], tri_hi[t, k])
                clo[k] = min(clo[k], cent[t, k])
                chi[k] = max(chi[k], cent[t, k])
        if e - b <= leaf_size:
            start[node] = b
            count[node] = e - b
            continue
        axis = 0
        if chi[1] - clo[1] > chi[axis] - clo[axis]:
            axis = 1
        if chi[2] - clo[2] > chi[axis] - clo[axis]:
            axis = 2
        seg = order[b:e]
        keys = cent[seg, axis]
        # stable sort keeps the split deterministic under equal centroids
        idx = np.argsort(keys, kind="mergesort")
        order[b:e] = seg[idx]
        mid = (b + e) // 2
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack[sp, 0] = n_nodes
        stack[sp, 1] = b
        stack[sp, 2] = mid
        sp += 1
        stack[sp, 0] = n_nodes + 1
        stack[sp, 1] = mid
        stack[sp, 2] = e
        sp += 1
        n_nodes += 2
    return lo[:n_nodes], hi[:n_nodes], left[:n_nodes], right[:n_nodes], start[:n_nodes], count[:n_nodes], order


def build_bvh(mesh: TriangleMesh, leaf_size: int = 4) -> Bvh:
    if mesh.n_triangles == 0:
        raise EmptyMeshError("cannot build a BVH over an empty mesh")
    c = mesh.corners()
    arrays = _build_kernel(c.min(axis=1), c.max(axis=1), c.mean(axis=1), int(leaf_size))
    return Bvh(*arrays, leaf_size=int(leaf_size))


# ---------------------------------------------------------------------------
# scalar kernels

@numba.njit(cache=True)
def _point_triangle(px, py, pz, V, a, b, c):
    """Closest point on triangle (a, b, c) to p, 7-region classification.

    Returns (squared distance, u, v, w) with barycentric weights on a, b, c.
    """
    ax, ay, az = V[a, 0], V[a, 1], V[a, 2]
    bx, by, bz = V[b, 0], V[b, 1], V[b, 2]
    cx, cy, cz = V[c, 0], V[c, 1], V[c, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    u, v, w = 1.0, 0.0, 0.0
    done = False
    if d1 <= 0.0 and d2 <= 0.0:
        done = True
    if not done:
        bpx, bpy, bpz = px - bx, py - by, pz - bz
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        if d3 >= 0.0 and d4 <= d3:
            u, v, w = 0.0, 1.0, 0.0
            done = True
    if not done:
        vc = d1 * d4 - d3 * d2
        if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            t = d1 / (d1 - d3)
            u, v, w = 1.0 - t, t, 0.0
            done = True
    if not done:
        cpx, cpy, cpz = px - cx, py - cy, pz - cz
        d5 = abx * cpx + aby * cpy + abz * cpz
        d6 = acx * cpx + acy * cpy + acz * cpz
        if d6 >= 0.0 and d5 <= d6:
            u, v, w = 0.0, 0.0, 1.0
            done = True
    if not done:
        vb = d5 * d2 - d1 * d6
        if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            t = d2 / (d2 - d6)
            u, v, w = 1.0 - t, 0.0, t
            done = True
    if not done:
        va = d3 * d6 - d5 * d4
        if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
            t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            u, v, w = 0.0, 1.0 - t, t
            done = True
    if not done:
        s = va + vb + vc
        if s > 0.0:
            v = vb / s
            w = vc / s
            u = 1.0 - v - w
        # zero-area triangle falling through every test keeps vertex a
    qx = u * ax + v * bx + w * cx
    qy = u * ay + v * by + w * cy
    qz = u * az + v * bz + w * cz
    dx, dy, dz = px - qx, py - qy, pz - qz
    return dx * dx + dy * dy + dz * dz, u, v, w


@numba.njit(cache=True)
def _box_dist2(px, py, pz, lo, hi, node):
    d2 = 0.0
    for k, p in ((0, px), (1, py), (2, pz)):
        if p < lo[node, k]:
            d2 += (lo[node, k] - p) ** 2
        elif p > hi[node, k]:
            d2 += (p - hi[node, k]) ** 2
    return d2


@numba.njit(cache=True)
def _ray_box(ox, oy, oz, dx, dy, dz, lo, hi, node, pad, t0, t1):
    """Slab test against the node box grown by ``pad``; returns (enter, exit)."""
    tmin, tmax = t0, t1
    for k, o, d in ((0, ox, dx), (1, oy, dy), (2, oz, dz)):
        l = lo[node, k] - pad
        h = hi[node, k] + pad
        if d == 0.0:
            if o < l or o > h:
                return 1.0, 0.0
        else:
            inv = 1.0 / d
            ta = (l - o) * inv
            tb = (h - o) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > tmin:
                tmin = ta
            if tb < tmax:
                tmax = tb
    return tmin, tmax


@numba.njit(cache=True)
def _ray_triangle(ox, oy, oz, dx, dy, dz, V, a, b, c):
    """Moller-Trumbore without back-face culling; inf on miss."""
    e1x, e1y, e1z = V[b, 0] - V[a, 0], V[b, 1] - V[a, 1], V[b, 2] - V[a, 2]
    e2x, e2y, e2z = V[c, 0] - V[a, 0], V[c, 1] - V[a, 1], V[c, 2] - V[a, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if det == 0.0:
        return np.inf
    inv = 1.0 / det
    tx, ty, tz = ox - V[a, 0], oy - V[a, 1], oz - V[a, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    return (e2x * qx + e2y * qy + e2z * qz) * inv


# ---------------------------------------------------------------------------
# batched kernels

@numba.njit(cache=True, parallel=True)
def _closest_bvh(lo, hi, left, right, start, count, order, V, T, P, radius):
    n = P.shape[0]
    tri = np.full(n, -1, np.int64)
    bary = np.zeros((n, 3))
    dist = np.full(n, np.inf)
    r2 = radius * radius
    for i in numba.prange(n):
        px, py, pz = P[i, 0], P[i, 1], P[i, 2]
        best = r2
        best_t = -1
        bu, bv, bw = 0.0, 0.0, 0.0
        stack = np.empty(_STACK, np.int64)
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_dist2(px, py, pz, lo, hi, node) > best:
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    t = order[k]
                    d2, u, v, w = _point_triangle(px, py, pz, V, T[t, 0], T[t, 1], T[t, 2])
                    if d2 < best or (d2 == best and (best_t < 0 or t < best_t)):
                        best = d2
                        best_t = t
                        bu, bv, bw = u, v, w
            else:
                # visit the nearer child first
                l, r = left[node], right[node]
                dl = _box_dist2(px, py, pz, lo, hi, l)
                dr = _box_dist2(px, py, pz, lo, hi, r)
                if dl <= dr:
                    stack[sp] = r
                    stack[sp + 1] = l
                else:
                    stack[sp] = l
                    stack[sp + 1] = r
                sp += 2
        if best_t >= 0:
            tri[i] = best_t
            bary[i, 0], bary[i, 1], bary[i, 2] = bu, bv, bw
            dist[i] = math.sqrt(best)
    return tri, bary, dist


@numba.njit(cache=True, parallel=True)
def _closest_brute(V, T, P):
    n = P.shape[0]
    tri = np.full(n, -1, np.int64)
    bary = np.zeros((n, 3))
    dist = np.full(n, np.inf)
    for i in numba.prange(n):
        best = np.inf
        for t in range(T.shape[0]):
            d2, u, v, w = _point_triangle(P[i, 0], P[i, 1], P[i, 2], V, T[t, 0], T[t, 1], T[t, 2])
            if d2 < best:
                best = d2
                tri[i] = t
                bary[i, 0], bary[i, 1], bary[i, 2] = u, v, w
        dist[i] = math.sqrt(best)
    return tri, bary, dist


@numba.njit(cache=True, parallel=True)
def _first_hit_bvh(lo, hi, left, right, start, count, order, V, T, O, D, tn, tf):
    n = O.shape[0]
    t_out = np.full(n, np.inf)
    tri = np.full(n, -1, np.int64)
    for i in numba.prange(n):
        ox, oy, oz = O[i, 0], O[i, 1], O[i, 2]
        dx, dy, dz = D[i, 0], D[i, 1], D[i, 2]
        best = tf[i]
        best_t = -1
        stack = np.empty(_STACK, np.int64)
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            a, b = _ray_box(ox, oy, oz, dx, dy, dz, lo, hi, node, 1e-9, tn[i], best)
            if a > b:
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    t = order[k]
                    th = _ray_triangle(ox, oy, oz, dx, dy, dz, V, T[t, 0], T[t, 1], T[t, 2])
                    if th >= tn[i] and th < np.inf and (th < best or (th == best and (best_t < 0 or t < best_t))):
                        best = th
                        best_t = t
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        if best_t >= 0:
            t_out[i] = best
            tri[i] = best_t
    return t_out, tri


@numba.njit(cache=True, parallel=True)
def _first_hit_brute(V, T, O, D, tn, tf):
    n = O.shape[0]
    t_out = np.full(n, np.inf)
    tri = np.full(n, -1, np.int64)
    for i in numba.prange(n):
        best = tf[i]
        for t in range(T.shape[0]):
            th = _ray_triangle(O[i, 0], O[i, 1], O[i, 2], D[i, 0], D[i, 1], D[i, 2],
                               V, T[t, 0], T[t, 1], T[t, 2])
            if th >= tn[i] and th < np.inf and th <= best and (th < best or tri[i] < 0):
                best = th
                tri[i] = t
        if tri[i] >= 0:
            t_out[i] = best
    return t_out, tri


@numba.njit(cache=True, parallel=True)
def _shell_candidates(lo, hi, left, right, O, D, tvals, pad):
    """Mark samples lying inside any leaf box grown by ``pad``."""
    n, ns = tvals.shape
    mask = np.zeros((n, ns), np.bool_)
    for i in numba.prange(n):
        ox, oy, oz = O[i, 0], O[i, 1], O[i, 2]
        dx, dy, dz = D[i, 0], D[i, 1], D[i, 2]
        t_lo = tvals[i, 0] - 1.0
        t_hi = tvals[i, ns - 1] + 1.0
        stack = np.empty(_STACK, np.int64)
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            a, b = _ray_box(ox, oy, oz, dx, dy, dz, lo, hi, node, pad, t_lo, t_hi)
            if a > b:
                continue
            if left[node] < 0:
                # samples are sorted along the ray
                j = np.searchsorted(tvals[i], a)
                while j < ns and tvals[i, j] <= b:
                    mask[i, j] = True
                    j += 1
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
    return mask


# ---------------------------------------------------------------------------
# python surface

def _as_points(x):
    return np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def closest_points(bvh: Bvh, mesh: TriangleMesh, points, radius: float = np.inf):
    """Batched nearest-triangle query.

    Returns ``(triangle_ids, barycentric, distances)``; points farther than
    ``radius`` from the mesh get id -1 and distance ``inf``.
    """
    if mesh.n_triangles == 0:
        raise EmptyMeshError("closest-point query on an empty mesh")
    return _closest_bvh(*bvh.arrays(), mesh.vertices, mesh.triangles, _as_points(points), float(radius))


def closest_points_brute(mesh: TriangleMesh, points):
    if mesh.n_triangles == 0:
        raise EmptyMeshError("closest-point query on an empty mesh")
    return _closest_brute(mesh.vertices, mesh.triangles, _as_points(points))


def _surface_point(mesh, tri, bary, dist):
    corners = mesh.vertices[mesh.triangles[tri]]
    return SurfacePoint(int(tri), bary.copy(), bary @ corners, float(dist))


def closest_point(bvh: Bvh, mesh: TriangleMesh, x) -> SurfacePoint:
    tri, bary, dist = closest_points(bvh, mesh, x)
    return _surface_point(mesh, tri[0], bary[0], dist[0])


def closest_point_brute(mesh: TriangleMesh, x) -> SurfacePoint:
    tri, bary, dist = closest_points_brute(mesh, x)
    return _surface_point(mesh, tri[0], bary[0], dist[0])


def _ray_arrays(origins, directions, t_near, t_far):
    O = _as_points(origins)
    D = _as_points(directions)
    n = O.shape[0]
    tn = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n,)).copy()
    tf = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n,)).copy()
    if not np.all(np.linalg.norm(D, axis=1) > 0):
        raise ValueError("ray direction must be nonzero")
    return O, D, tn, tf


def first_hits(bvh: Bvh, mesh: TriangleMesh, origins, directions, t_near=0.0, t_far=np.inf):
    """Batched first intersection: ``(t, triangle_ids, front_facing)``; misses have id -1."""
    O, D, tn, tf = _ray_arrays(origins, directions, t_near, t_far)
    t, tri = _first_hit_bvh(*bvh.arrays(), mesh.vertices, mesh.triangles, O, D, tn, tf)
    front = np.zeros(len(t), dtype=bool)
    hit = tri >= 0
    front[hit] = np.einsum("ij,ij->i", D[hit], mesh.normals[tri[hit]]) < 0
    return t, tri, front


def first_hits_brute(mesh: TriangleMesh, origins, directions, t_near=0.0, t_far=np.inf):
    O, D, tn, tf = _ray_arrays(origins, directions, t_near, t_far)
    t, tri = _first_hit_brute(mesh.vertices, mesh.triangles, O, D, tn, tf)
    front = np.zeros(len(t), dtype=bool)
    hit = tri >= 0
    front[hit] = np.einsum("ij,ij->i", D[hit], mesh.normals[tri[hit]]) < 0
    return t, tri, front


def first_hit(bvh: Bvh, mesh: TriangleMesh, ray) -> Hit | None:
    """First intersection of ``ray`` (anything with origin/direction/t_near/t_far)."""
    t, tri, front = first_hits(bvh, mesh, ray.origin, ray.direction,
                               getattr(ray, "t_near", 0.0), getattr(ray, "t_far", np.inf))
    if tri[0] < 0:
        return None
    return Hit(float(t[0]), int(tri[0]), bool(front[0]))


def shell_candidates(bvh: Bvh, origins, directions, tvals, eps: float):
    """Boolean mask of samples that may lie within ``eps`` of the mesh.

    Conservative: every sample with d(x, M) <= eps is marked.
    """
    O = _as_points(origins)
    D = _as_points(directions)
    tv = np.ascontiguousarray(tvals, dtype=np.float64)
    pad = eps * (1.0 + 1e-9) + 1e-12
    return _shell_candidates(bvh.lo, bvh.hi, bvh.left, bvh.right, O, D, tv, pad)


def distance_gradient(mesh: TriangleMesh, sp: SurfacePoint, x):
    """Gradient of d(x, M) w.r.t. x and the three corners of the nearest triangle.

    Barycentric weights are held fixed. Returns ``(d_x (3,), d_corners (3, 3))``.
    """
    x = np.asarray(x, dtype=np.float64)
    diff = x - sp.position
    d = float(np.linalg.norm(diff))
    if d == 0.0:
        raise DegenerateGradientError("distance gradient undefined at d = 0")
    gx = diff / d
    return gx, -np.outer(sp.barycentric, gx)


def distance_gradients(mesh: TriangleMesh, points, tri, bary):
    """Batched version; zero rows where the distance vanishes.

    Returns ``(distance, d_x (k, 3))``; corner gradients are ``-bary[:, :, None] * d_x[:, None]``.
    """
    corners = mesh.vertices[mesh.triangles[tri]]
    closest = np.einsum("kj,kja->ka", bary, corners)
    diff = points - closest
    d = np.linalg.norm(diff, axis=1)
    gx = np.divide(diff, d[:, None], out=np.zeros_like(diff), where=d[:, None] > 0)
    return d, gx
