"""Shared fixtures and independent oracle implementations.

The oracles here are deliberately written against different primitives than
the library (vectorized numpy instead of scalar kernels, exhaustive scans
instead of trees) so that agreement is meaningful.
"""

from __future__ import annotations

import json

import numpy as np
import pytest

from rigfields.core import Mesh, Skeleton, SkinWeights


@pytest.fixture
def minimal_rig_doc() -> dict:
    return {
        "version": 1,
        "mesh": {"vertices": [[0.0, 0.0, 0.0]], "triangles": []},
        "skeleton": {"joints": [[0.0, 0.0, 0.0]], "parents": [-1]},
    }


@pytest.fixture
def minimal_rig_path(tmp_path, minimal_rig_doc):
    path = tmp_path / "minimal.json"
    path.write_text(json.dumps(minimal_rig_doc))
    return path


def make_cube_mesh(lo: float = -0.5, hi: float = 0.5) -> Mesh:
    """Axis-aligned cube surface as 12 triangles."""
    verts = np.array([[x, y, z] for x in (lo, hi) for y in (lo, hi) for z in (lo, hi)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return Mesh(verts, faces)


def make_uv_sphere(center, radius: float, n_theta: int = 24, n_phi: int = 12) -> Mesh:
    """UV sphere triangle mesh (poles + latitude rings)."""
    center = np.asarray(center, dtype=np.float64)
    phis = np.linspace(-np.pi / 2, np.pi / 2, n_phi + 1)[1:-1]
    thetas = np.linspace(0.0, 2 * np.pi, n_theta, endpoint=False)
    verts = [center + [0.0, 0.0, -radius]]
    for phi in phis:
        for t in thetas:
            verts.append(
                center
                + radius * np.array([np.cos(phi) * np.cos(t), np.cos(phi) * np.sin(t), np.sin(phi)])
            )
    verts.append(center + [0.0, 0.0, radius])
    tris = []
    bottom, top = 0, len(verts) - 1
    ring = lambda r: 1 + r * n_theta
    for s in range(n_theta):
        tris.append((bottom, ring(0) + (s + 1) % n_theta, ring(0) + s))
    for r in range(len(phis) - 1):
        for s in range(n_theta):
            s1 = (s + 1) % n_theta
            tris.append((ring(r) + s, ring(r + 1) + s1, ring(r + 1) + s))
            tris.append((ring(r) + s, ring(r) + s1, ring(r + 1) + s1))
    last = ring(len(phis) - 1)
    for s in range(n_theta):
        tris.append((top, last + s, last + (s + 1) % n_theta))
    return Mesh(np.array(verts), np.array(tris))


def chain_skeleton(points) -> Skeleton:
    points = np.asarray(points, dtype=np.float64)
    return Skeleton(points, [-1] + list(range(len(points) - 1)))


def uniform_skin(n_vertices: int, n_joints: int) -> SkinWeights:
    w = 1.0 / n_joints
    return SkinWeights([[(j, w) for j in range(n_joints)]] * n_vertices, n_joints)


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------


def oracle_triangle_box_overlap(tri, center, half) -> bool:
    """Vectorized separating-axis triangle/cube test, written independently of
    the library's scalar implementation."""
    tri = np.asarray(tri, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    edges = np.array([tri[1] - tri[0], tri[2] - tri[1], tri[0] - tri[2]])
    unit = np.eye(3)
    axes = [np.cross(unit[a], edges[k]) for a in range(3) for k in range(3)]
    axes.extend(unit)
    axes.append(np.cross(edges[0], edges[1]))
    for axis in axes:
        radius = half * np.abs(axis).sum()
        proj = tri @ axis
        if proj.min() > radius + 0.0 or proj.max() < -radius - 0.0:
            return False
    return True


def _oracle_overlap_mask(tri, centers, half) -> np.ndarray:
    """Vectorized form of the oracle SAT test: one triangle vs many cubes."""
    v = tri[None, :, :] - centers[:, None, :]  # (N, 3, 3)
    edges = np.array([tri[1] - tri[0], tri[2] - tri[1], tri[0] - tri[2]])
    unit = np.eye(3)
    axes = [np.cross(unit[a], edges[k]) for a in range(3) for k in range(3)]
    axes.extend(unit)
    axes.append(np.cross(edges[0], edges[1]))
    alive = np.ones(len(centers), dtype=bool)
    for axis in axes:
        radius = half * np.abs(axis).sum()
        proj = v @ axis  # (N, 3)
        separated = (proj.min(axis=1) > radius) | (proj.max(axis=1) < -radius)
        alive &= ~separated
        if not alive.any():
            break
    return alive


def oracle_voxelize_all(mesh: Mesh, resolution: int) -> set[tuple[int, int, int]]:
    """Exhaustive scan of every voxel against every triangle."""
    size = 1.0 / resolution
    half = size / 2.0
    r = np.arange(resolution)
    coords = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    centers = (coords + 0.5) * size - 0.5
    hit = np.zeros(len(coords), dtype=bool)
    for tri in mesh.vertices[mesh.triangles]:
        hit |= _oracle_overlap_mask(np.asarray(tri, dtype=np.float64), centers, half)
    return set(map(tuple, coords[hit].tolist()))


def oracle_segment_box_overlap(p0, p1, lo, hi, eps: float = 0.0) -> bool:
    """Slab-clipping segment/AABB test."""
    p0 = np.asarray(p0, dtype=np.float64)
    d = np.asarray(p1, dtype=np.float64) - p0
    t0, t1 = 0.0, 1.0
    for a in range(3):
        if abs(d[a]) < 1e-300:
            if p0[a] < lo[a] - eps or p0[a] > hi[a] + eps:
                return False
        else:
            ta = (lo[a] - p0[a]) / d[a]
            tb = (hi[a] - p0[a]) / d[a]
            ta, tb = min(ta, tb), max(ta, tb)
            t0, t1 = max(t0, ta), min(t1, tb)
            if t0 > t1:
                return False
    return True


def oracle_segment_voxels_all(p0, p1, resolution: int) -> set[tuple[int, int, int]]:
    """All-voxel slab-clipping scan for one segment (vectorized over voxels)."""
    p0 = np.asarray(p0, dtype=np.float64)
    d = np.asarray(p1, dtype=np.float64) - p0
    size = 1.0 / resolution
    r = np.arange(resolution)
    coords = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    lo = coords * size - 0.5
    hi = lo + size
    t0 = np.zeros(len(coords))
    t1 = np.ones(len(coords))
    alive = np.ones(len(coords), dtype=bool)
    for a in range(3):
        if abs(d[a]) < 1e-300:
            alive &= (p0[a] >= lo[:, a]) & (p0[a] <= hi[:, a])
        else:
            ta = (lo[:, a] - p0[a]) / d[a]
            tb = (hi[:, a] - p0[a]) / d[a]
            lo_t = np.minimum(ta, tb)
            hi_t = np.maximum(ta, tb)
            t0 = np.maximum(t0, lo_t)
            t1 = np.minimum(t1, hi_t)
    alive &= t0 <= t1
    return set(map(tuple, coords[alive].tolist()))


def oracle_closest_point_triangles(tri_pts: np.ndarray, query: np.ndarray):
    """Vectorized closest point from one query to many triangles.

    Returns (distances, points). Uses the vectorized region-masking
    formulation, an independent code path from the scalar kernel.
    """
    a, b, c = tri_pts[:, 0, :], tri_pts[:, 1, :], tri_pts[:, 2, :]
    p = np.asarray(query, dtype=np.float64)
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)

    result = np.zeros_like(a)
    remain = np.ones(len(a), dtype=bool)

    is_a = (d1 <= 0) & (d2 <= 0)
    result[is_a] = a[is_a]
    remain &= ~is_a

    is_b = (d3 >= 0) & (d4 <= d3) & remain
    result[is_b] = b[is_b]
    remain &= ~is_b

    vc = d1 * d4 - d3 * d2
    is_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0) & remain
    if is_ab.any():
        t = (d1[is_ab] / (d1[is_ab] - d3[is_ab]))[:, None]
        result[is_ab] = a[is_ab] + t * ab[is_ab]
    remain &= ~is_ab

    is_c = (d6 >= 0) & (d5 <= d6) & remain
    result[is_c] = c[is_c]
    remain &= ~is_c

    vb = d5 * d2 - d1 * d6
    is_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0) & remain
    if is_ac.any():
        t = (d2[is_ac] / (d2[is_ac] - d6[is_ac]))[:, None]
        result[is_ac] = a[is_ac] + t * ac[is_ac]
    remain &= ~is_ac

    va = d3 * d6 - d5 * d4
    is_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0) & remain
    if is_bc.any():
        t = ((d4[is_bc] - d3[is_bc]) / ((d4[is_bc] - d3[is_bc]) + (d5[is_bc] - d6[is_bc])))[:, None]
        result[is_bc] = b[is_bc] + t * (c[is_bc] - b[is_bc])
    remain &= ~is_bc

    if remain.any():
        denom = 1.0 / (va[remain] + vb[remain] + vc[remain])
        v = (vb[remain] * denom)[:, None]
        w = (vc[remain] * denom)[:, None]
        result[remain] = a[remain] + ab[remain] * v + ac[remain] * w

    return np.linalg.norm(result - p, axis=1), result


def exact_ot_cost_square(cost: np.ndarray) -> float:
    """Exact optimal transport cost for square problems with uniform
    marginals: enumeration over permutation matrices (Birkhoff vertices)."""
    from itertools import permutations

    n = len(cost)
    best = np.inf
    for perm in permutations(range(n)):
        val = sum(cost[i, perm[i]] for i in range(n)) / n
        best = min(best, val)
    return best


def exact_ot_cost_lp(cost: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Exact optimal transport cost via linear programming (any shape)."""
    from scipy.optimize import linprog

    n, m = cost.shape
    a_eq = []
    b_eq = []
    for i in range(n):
        row = np.zeros(n * m)
        row[i * m : (i + 1) * m] = 1.0
        a_eq.append(row)
        b_eq.append(a[i])
    for j in range(m):
        col = np.zeros(n * m)
        col[j::m] = 1.0
        a_eq.append(col)
        b_eq.append(b[j])
    res = linprog(cost.ravel(), A_eq=np.array(a_eq), b_eq=np.array(b_eq), bounds=(0, None), method="highs")
    assert res.success
    return float(res.fun)
