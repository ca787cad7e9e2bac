"""Bounding volume hierarchy over mesh triangles for nearest-surface queries
and barycentric skin-weight transfer.

The tree is a median-split (longest axis) binary BVH built once per mesh;
queries run in a numba-compiled traversal with box-distance pruning. Ties
between triangles at exactly equal distance resolve to the lowest original
triangle index, matching a brute-force scan in input order.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .core import Mesh, Rig, SkinWeights
from .errors import ParseError, ValidationError

LEAF_SIZE = 8

_MAGIC = b"RBVH"
_VERSION = 1


@njit(cache=True, nogil=True)
def _pt_tri(ax, ay, az, bx, by, bz, cx, cy, cz, px, py, pz):
    """Closest point on one triangle: (d2, qx, qy, qz, u, v, w).

    Region classification from the standard closest-point construction;
    (u, v, w) are barycentric coordinates of the result w.r.t. (a, b, c).
    """
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az

    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        dx, dy, dz = px - ax, py - ay, pz - az
        return dx * dx + dy * dy + dz * dz, ax, ay, az, 1.0, 0.0, 0.0

    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        dx, dy, dz = px - bx, py - by, pz - bz
        return dx * dx + dy * dy + dz * dz, bx, by, bz, 0.0, 1.0, 0.0

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        qx, qy, qz = ax + t * abx, ay + t * aby, az + t * abz
        dx, dy, dz = px - qx, py - qy, pz - qz
        return dx * dx + dy * dy + dz * dz, qx, qy, qz, 1.0 - t, t, 0.0

    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        dx, dy, dz = px - cx, py - cy, pz - cz
        return dx * dx + dy * dy + dz * dz, cx, cy, cz, 0.0, 0.0, 1.0

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        qx, qy, qz = ax + t * acx, ay + t * acy, az + t * acz
        dx, dy, dz = px - qx, py - qy, pz - qz
        return dx * dx + dy * dy + dz * dz, qx, qy, qz, 1.0 - t, 0.0, t

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = bx + t * (cx - bx)
        qy = by + t * (cy - by)
        qz = bz + t * (cz - bz)
        dx, dy, dz = px - qx, py - qy, pz - qz
        return dx * dx + dy * dy + dz * dz, qx, qy, qz, 0.0, 1.0 - t, t

    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    qx = ax + abx * v + acx * w
    qy = ay + aby * v + acy * w
    qz = az + abz * v + acz * w
    dx, dy, dz = px - qx, py - qy, pz - qz
    return dx * dx + dy * dy + dz * dz, qx, qy, qz, 1.0 - v - w, v, w


@njit(cache=True, nogil=True)
def _box_d2(bmin, bmax, px, py, pz):
    d2 = 0.0
    for a in range(3):
        p = px if a == 0 else (py if a == 1 else pz)
        if p < bmin[a]:
            d2 += (bmin[a] - p) * (bmin[a] - p)
        elif p > bmax[a]:
            d2 += (p - bmax[a]) * (p - bmax[a])
    return d2


@njit(cache=True, nogil=True)
def _query_one(bmin, bmax, left, right, start, count, tris, perm, px, py, pz):
    stack = np.empty(128, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    best_d2 = np.inf
    best_orig = -1
    qx = qy = qz = 0.0
    bu = bv = bw = 0.0
    while top > 0:
        top -= 1
        node = stack[top]
        if _box_d2(bmin[node], bmax[node], px, py, pz) > best_d2:
            continue
        if count[node] > 0:
            for t in range(start[node], start[node] + count[node]):
                d2, cx_, cy_, cz_, u, v, w = _pt_tri(
                    tris[t, 0], tris[t, 1], tris[t, 2],
                    tris[t, 3], tris[t, 4], tris[t, 5],
                    tris[t, 6], tris[t, 7], tris[t, 8],
                    px, py, pz,
                )
                orig = perm[t]
                if d2 < best_d2 or (d2 == best_d2 and orig < best_orig):
                    best_d2 = d2
                    best_orig = orig
                    qx, qy, qz = cx_, cy_, cz_
                    bu, bv, bw = u, v, w
        else:
            l, r = left[node], right[node]
            dl = _box_d2(bmin[l], bmax[l], px, py, pz)
            dr = _box_d2(bmin[r], bmax[r], px, py, pz)
            # Push the farther child first so the nearer one is explored next.
            if dl <= dr:
                stack[top] = r
                top += 1
                stack[top] = l
                top += 1
            else:
                stack[top] = l
                top += 1
                stack[top] = r
                top += 1
    return best_d2, best_orig, qx, qy, qz, bu, bv, bw


@njit(cache=True, nogil=True)
def _query_batch(bmin, bmax, left, right, start, count, tris, perm, queries):
    n = len(queries)
    d2s = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    pts = np.empty((n, 3))
    bary = np.empty((n, 3))
    for i in range(n):
        d2, orig, qx, qy, qz, u, v, w = _query_one(
            bmin, bmax, left, right, start, count, tris, perm,
            queries[i, 0], queries[i, 1], queries[i, 2],
        )
        d2s[i] = d2
        idx[i] = orig
        pts[i, 0], pts[i, 1], pts[i, 2] = qx, qy, qz
        bary[i, 0], bary[i, 1], bary[i, 2] = u, v, w
    return d2s, idx, pts, bary


@njit(cache=True, nogil=True)
def _brute_batch(tris, queries):
    """Exhaustive scan in original triangle order (ties keep the first hit)."""
    n = len(queries)
    m = len(tris)
    d2s = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    pts = np.empty((n, 3))
    bary = np.empty((n, 3))
    for i in range(n):
        px, py, pz = queries[i, 0], queries[i, 1], queries[i, 2]
        best = np.inf
        best_t = -1
        qx = qy = qz = 0.0
        bu = bv = bw = 0.0
        for t in range(m):
            d2, cx_, cy_, cz_, u, v, w = _pt_tri(
                tris[t, 0], tris[t, 1], tris[t, 2],
                tris[t, 3], tris[t, 4], tris[t, 5],
                tris[t, 6], tris[t, 7], tris[t, 8],
                px, py, pz,
            )
            if d2 < best:
                best = d2
                best_t = t
                qx, qy, qz = cx_, cy_, cz_
                bu, bv, bw = u, v, w
        d2s[i] = best
        idx[i] = best_t
        pts[i, 0], pts[i, 1], pts[i, 2] = qx, qy, qz
        bary[i, 0], bary[i, 1], bary[i, 2] = bu, bv, bw
    return d2s, idx, pts, bary


@dataclass(frozen=True)
class SurfaceHit:
    """Nearest point on a triangle soup for one query."""

    triangle_index: int
    point: np.ndarray
    barycentric: np.ndarray
    distance: float


@dataclass(frozen=True)
class TriangleBvh:
    """Immutable hierarchy; concurrent queries are safe."""

    mesh: Mesh
    bounds_min: np.ndarray  # (K, 3)
    bounds_max: np.ndarray  # (K, 3)
    left: np.ndarray  # (K,) child ids, -1 at leaves
    right: np.ndarray
    start: np.ndarray  # (K,) leaf triangle range start (in permuted order)
    count: np.ndarray  # (K,) leaf triangle count, 0 for internal nodes
    perm: np.ndarray  # (T,) permuted -> original triangle index
    tris_flat: np.ndarray  # (T, 9) triangle vertices in permuted order

    @property
    def node_count(self) -> int:
        return len(self.bounds_min)


def _flatten_triangles(mesh: Mesh) -> np.ndarray:
    return mesh.vertices[mesh.triangles].reshape(-1, 9).astype(np.float64)


def build_bvh(mesh: Mesh) -> TriangleBvh:
    """Median-split BVH on the longest axis of triangle centroids."""
    t = len(mesh.triangles)
    if t == 0:
        raise ValidationError("cannot build a BVH over an empty triangle list")
    tri_pts = mesh.vertices[mesh.triangles]  # (T, 3, 3)
    tri_min = tri_pts.min(axis=1)
    tri_max = tri_pts.max(axis=1)
    centroids = tri_pts.mean(axis=1)

    bounds_min: list[np.ndarray] = []
    bounds_max: list[np.ndarray] = []
    left: list[int] = []
    right: list[int] = []
    start: list[int] = []
    count: list[int] = []
    perm = np.empty(t, dtype=np.int64)
    cursor = 0

    def new_node(ids: np.ndarray) -> int:
        node = len(bounds_min)
        bounds_min.append(tri_min[ids].min(axis=0))
        bounds_max.append(tri_max[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(-1)
        count.append(0)
        return node

    stack: list[tuple[int, np.ndarray]] = [(new_node(np.arange(t)), np.arange(t))]
    while stack:
        node, ids = stack.pop()
        if len(ids) <= LEAF_SIZE:
            start[node] = cursor
            count[node] = len(ids)
            perm[cursor : cursor + len(ids)] = ids
            cursor += len(ids)
            continue
        c = centroids[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        order = np.argsort(c[:, axis], kind="stable")
        mid = len(ids) // 2
        l_ids, r_ids = ids[order[:mid]], ids[order[mid:]]
        l_node = new_node(l_ids)
        r_node = new_node(r_ids)
        left[node], right[node] = l_node, r_node
        stack.append((r_node, r_ids))
        stack.append((l_node, l_ids))

    flat = tri_pts[perm].reshape(-1, 9)
    return TriangleBvh(
        mesh=mesh,
        bounds_min=np.array(bounds_min),
        bounds_max=np.array(bounds_max),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        perm=perm,
        tris_flat=flat,
    )


def closest_points(bvh: TriangleBvh, queries: np.ndarray):
    """Batch nearest-surface query: (distances, triangle indices, points, barycentrics)."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    d2, idx, pts, bary = _query_batch(
        bvh.bounds_min, bvh.bounds_max, bvh.left, bvh.right, bvh.start, bvh.count,
        bvh.tris_flat, bvh.perm, q,
    )
    return np.sqrt(d2), idx, pts, bary


def closest_point(bvh: TriangleBvh, query: np.ndarray) -> SurfaceHit:
    """Globally nearest point on the triangle soup for one query point."""
    dist, idx, pts, bary = closest_points(bvh, np.asarray(query, dtype=np.float64).reshape(1, 3))
    return SurfaceHit(
        triangle_index=int(idx[0]),
        point=pts[0],
        barycentric=bary[0],
        distance=float(dist[0]),
    )


def brute_force_closest(mesh: Mesh, queries: np.ndarray):
    """Reference scan over every triangle in input order (no acceleration)."""
    if len(mesh.triangles) == 0:
        raise ValidationError("mesh has no triangles")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    d2, idx, pts, bary = _brute_batch(_flatten_triangles(mesh), q)
    return np.sqrt(d2), idx, pts, bary


# ---------------------------------------------------------------------------
# Skin transfer
# ---------------------------------------------------------------------------


def transfer_skin_bvh(src: Rig, dst_mesh: Mesh, bvh: TriangleBvh | None = None) -> SkinWeights:
    """Transfer skin weights by barycentric interpolation at the nearest
    surface point of the source mesh (robust to uneven vertex sampling)."""
    if src.skin is None:
        raise ValidationError("source rig has no skin weights")
    if bvh is None:
        bvh = build_bvh(src.mesh)
    _, idx, _, bary = closest_points(bvh, dst_mesh.vertices)
    corners = src.mesh.triangles[idx]  # (V, 3)
    dense_src = src.skin.to_dense()
    blended = (
        bary[:, 0:1] * dense_src[corners[:, 0]]
        + bary[:, 1:2] * dense_src[corners[:, 1]]
        + bary[:, 2:3] * dense_src[corners[:, 2]]
    )
    return SkinWeights.from_dense(blended)


def transfer_skin_nn(src: Rig, dst_mesh: Mesh) -> SkinWeights:
    """Baseline transfer: copy the weight vector of the nearest source vertex."""
    if src.skin is None:
        raise ValidationError("source rig has no skin weights")
    _, nearest = cKDTree(src.mesh.vertices).query(dst_mesh.vertices)
    return SkinWeights(
        [src.skin.entries[int(i)] for i in np.atleast_1d(nearest)],
        joint_count=src.skin.joint_count,
    )


# ---------------------------------------------------------------------------
# Binary cache (save/restore of the hierarchy)
# ---------------------------------------------------------------------------


def mesh_digest(mesh: Mesh) -> bytes:
    h = hashlib.sha256()
    h.update(mesh.vertices.astype("<f8").tobytes())
    h.update(mesh.triangles.astype("<i8").tobytes())
    return h.digest()


def save_bvh(bvh: TriangleBvh, path: str | Path) -> None:
    k, t = bvh.node_count, len(bvh.perm)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(mesh_digest(bvh.mesh))
        fh.write(struct.pack("<II", k, t))
        fh.write(bvh.bounds_min.astype("<f8").tobytes())
        fh.write(bvh.bounds_max.astype("<f8").tobytes())
        fh.write(bvh.left.astype("<i8").tobytes())
        fh.write(bvh.right.astype("<i8").tobytes())
        fh.write(bvh.start.astype("<i8").tobytes())
        fh.write(bvh.count.astype("<i8").tobytes())
        fh.write(bvh.perm.astype("<i8").tobytes())


def load_bvh(path: str | Path, mesh: Mesh) -> TriangleBvh:
    """Restore a cached hierarchy; refuses mismatched versions or meshes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 + 32 + 8 or raw[:4] != _MAGIC:
        raise ParseError(f"{path}: not a BVH cache file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise ParseError(f"{path}: unsupported BVH cache version {version}")
    digest = raw[8:40]
    if digest != mesh_digest(mesh):
        raise ValidationError(f"{path}: BVH cache was built for a different mesh")
    k, t = struct.unpack_from("<II", raw, 40)
    off = 48

    def take(dtype_str, native, shape):
        nonlocal off
        n_items = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype=dtype_str, count=n_items, offset=off).reshape(shape)
        off += arr.nbytes
        return arr.astype(native)

    bounds_min = take("<f8", np.float64, (k, 3))
    bounds_max = take("<f8", np.float64, (k, 3))
    left = take("<i8", np.int64, (k,))
    right = take("<i8", np.int64, (k,))
    start = take("<i8", np.int64, (k,))
    count = take("<i8", np.int64, (k,))
    perm = take("<i8", np.int64, (t,))
    if len(mesh.triangles) != t:
        raise ValidationError(f"{path}: triangle count mismatch")
    flat = mesh.vertices[mesh.triangles][perm].reshape(-1, 9).astype(np.float64)
    return TriangleBvh(
        mesh=mesh,
        bounds_min=bounds_min,
        bounds_max=bounds_max,
        left=left,
        right=right,
        start=start,
        count=count,
        perm=perm,
        tris_flat=flat,
    )
