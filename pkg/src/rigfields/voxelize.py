"""Sparse voxelization of mesh surfaces and skeleton bones.

Surface voxels are those whose axis-aligned cube is touched by at least one
triangle (conservative separating-axis test). Skeleton voxels are traversed
by parametric 3D DDA along each bone segment, then dilated by an L-infinity
radius so the field support envelops the kinematic chains.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import Mesh, Skeleton, SparseVoxelGrid, point_to_voxel, CUBE_EPS
from .errors import ParseError, ValidationError

# Above this resolution the dense dilation buffer would be too large.
_DENSE_DILATE_LIMIT = 256


def triangle_box_overlap(tri: np.ndarray, center: np.ndarray, half: float) -> bool:
    """Conservative SAT overlap test between a triangle and an axis-aligned cube.

    Touching contact counts as overlap; the test reports separation only when
    a strict separating axis exists (13-axis separating axis theorem).
    """
    v = np.asarray(tri, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    e = np.array([v[1] - v[0], v[2] - v[1], v[0] - v[2]])

    # Cube face normals.
    if (v.max(axis=0) < -half).any() or (v.min(axis=0) > half).any():
        return False

    # Nine edge cross-product axes: cross(unit_axis_a, edge_e).
    for a in range(3):
        u, w = (a + 1) % 3, (a + 2) % 3
        for k in range(3):
            axis = np.zeros(3)
            axis[u] = -e[k][w]
            axis[w] = e[k][u]
            p = v @ axis
            r = half * (abs(axis[u]) + abs(axis[w]))
            if p.min() > r or p.max() < -r:
                return False

    # Triangle plane.
    n = np.cross(e[0], e[1])
    r = half * np.abs(n).sum()
    d = float(n @ v[0])
    if abs(d) > r:
        return False
    return True


def voxelize_surface(mesh: Mesh, resolution: int) -> SparseVoxelGrid:
    """Voxels whose cube intersects at least one mesh triangle.

    The mesh must already be unit-cube normalized; candidates are gathered
    from each triangle's bounding box and kept when the SAT test passes.
    """
    if mesh.vertex_count == 0 or len(mesh.triangles) == 0:
        raise ValidationError("cannot voxelize an empty mesh")
    if not mesh.is_normalized():
        worst = float(np.abs(mesh.vertices).max())
        raise ValidationError(
            f"mesh is not unit-cube normalized (max |coord| {worst:.6f} > 0.5 + {CUBE_EPS})"
        )
    n = int(resolution)
    size = 1.0 / n
    half = size / 2.0
    occupied: set[tuple[int, int, int]] = set()
    verts = mesh.vertices
    for tri_idx in mesh.triangles:
        tri = verts[tri_idx]
        # Closed boxes: a coordinate exactly on a voxel face belongs to both
        # neighbors, so the candidate range extends one layer below ceil.
        g_min = (tri.min(axis=0) + 0.5) * n
        g_max = (tri.max(axis=0) + 0.5) * n
        lo = np.clip(np.ceil(g_min).astype(np.int64) - 1, 0, n - 1)
        hi = np.clip(np.floor(g_max).astype(np.int64), 0, n - 1)
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                for k in range(lo[2], hi[2] + 1):
                    if (i, j, k) in occupied:
                        continue
                    center = (np.array([i, j, k]) + 0.5) * size - 0.5
                    if triangle_box_overlap(tri, center, half):
                        occupied.add((i, j, k))
    return SparseVoxelGrid(n, np.array(sorted(occupied), dtype=np.int64))


def traverse_segment(p0: np.ndarray, p1: np.ndarray, resolution: int) -> list[tuple[int, int, int]]:
    """Voxels visited by the segment p0 -> p1 (Amanatides-Woo 3D DDA)."""
    n = int(resolution)
    g0 = (np.asarray(p0, np.float64) + 0.5) * n
    g1 = (np.asarray(p1, np.float64) + 0.5) * n
    v = np.clip(np.floor(g0).astype(np.int64), 0, n - 1)
    v_end = np.clip(np.floor(g1).astype(np.int64), 0, n - 1)
    d = g1 - g0
    step = np.sign(d).astype(np.int64)
    t_max = np.full(3, np.inf)
    t_delta = np.full(3, np.inf)
    for a in range(3):
        if d[a] > 0:
            t_max[a] = (v[a] + 1 - g0[a]) / d[a]
            t_delta[a] = 1.0 / d[a]
        elif d[a] < 0:
            t_max[a] = (v[a] - g0[a]) / d[a]
            t_delta[a] = -1.0 / d[a]
    visited = [tuple(int(x) for x in v)]
    # A segment can cross at most |dv| boundaries per axis; cap guards float slip.
    for _ in range(int(np.abs(v_end - v).sum()) + 3 * n + 3):
        if (v == v_end).all():
            break
        a = int(np.argmin(t_max))
        if t_max[a] > 1.0 + 1e-12:
            break
        v[a] += step[a]
        t_max[a] += t_delta[a]
        if (v < 0).any() or (v >= n).any():
            break
        visited.append(tuple(int(x) for x in v))
    end_t = tuple(int(x) for x in v_end)
    if end_t not in visited:
        visited.append(end_t)
    return visited


def voxelize_skeleton(skeleton: Skeleton, resolution: int, dilation: int = 2) -> SparseVoxelGrid:
    """Voxels traversed by the bone segments, dilated by an L-inf radius.

    Roots contribute the voxel containing the joint, so isolated joints are
    always covered.
    """
    if skeleton.joint_count == 0:
        raise ValidationError("cannot voxelize an empty skeleton")
    if dilation < 0:
        raise ValidationError(f"dilation radius must be >= 0, got {dilation}")
    if np.abs(skeleton.joints).max() > 0.5 + CUBE_EPS:
        worst = float(np.abs(skeleton.joints).max())
        raise ValidationError(f"joint outside the unit cube (max |coord| {worst:.6f})")
    n = int(resolution)
    occupied: set[tuple[int, int, int]] = set()
    for i, p in enumerate(skeleton.parents):
        if p < 0:
            occupied.add(tuple(int(x) for x in point_to_voxel(skeleton.joints[i], n)[0]))
        else:
            occupied.update(traverse_segment(skeleton.joints[i], skeleton.joints[p], n))
    grid = SparseVoxelGrid(n, np.array(sorted(occupied), dtype=np.int64))
    return dilate(grid, dilation)


def dilate(grid: SparseVoxelGrid, radius: int) -> SparseVoxelGrid:
    """Minkowski sum with the L-inf ball of the given radius, clipped to bounds."""
    if radius < 0:
        raise ValidationError(f"dilation radius must be >= 0, got {radius}")
    if radius == 0 or len(grid) == 0:
        return grid
    n = grid.resolution
    if n <= _DENSE_DILATE_LIMIT:
        dense = np.zeros((n, n, n), dtype=bool)
        dense[tuple(grid.occupied.T)] = True
        dense = ndimage.maximum_filter(dense, size=2 * radius + 1, mode="constant", cval=False)
        coords = np.argwhere(dense)
    else:
        r = np.arange(-radius, radius + 1)
        offs = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
        coords = (grid.occupied[:, None, :] + offs[None, :, :]).reshape(-1, 3)
        inside = ((coords >= 0) & (coords < n)).all(axis=1)
        coords = np.unique(coords[inside], axis=0)
    return SparseVoxelGrid(n, coords)


# ---------------------------------------------------------------------------
# Grid JSON I/O
# ---------------------------------------------------------------------------


def save_grid(grid: SparseVoxelGrid, path: str | Path) -> None:
    """Voxel grid JSON with lexicographically sorted coordinates."""
    doc = {"resolution": grid.resolution, "occupied": grid.occupied.tolist()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_grid(path: str | Path) -> SparseVoxelGrid:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    try:
        return SparseVoxelGrid(int(doc["resolution"]), np.asarray(doc["occupied"], dtype=np.int64))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: grid document missing field: {exc}") from exc
