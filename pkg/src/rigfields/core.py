"""Core domain types (mesh, skeleton, skin weights, rig, sparse voxel grid),
their validation, unit-cube normalization, and the rig JSON file format.

All types are immutable after construction and safe to share across threads.
Coordinates follow the unit-cube convention: a normalized asset fits inside
[-0.5, 0.5]^3.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError, ValidationError

# Skin weight sums may drift by this much before loading is refused.
WEIGHT_SUM_TOLERANCE = 1e-3
# After normalization the per-vertex sums are exact to this tolerance.
WEIGHT_SUM_STRICT = 1e-6
# Slack allowed on the unit-cube bound when checking "normalized" meshes.
CUBE_EPS = 1e-6


def _as_points(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValidationError(f"{name} must be an (N, 3) array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh with unit-cube-normalized vertex positions."""

    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64 indices into vertices

    def __init__(self, vertices, triangles):
        object.__setattr__(self, "vertices", _as_points(vertices, "mesh.vertices"))
        tris = np.asarray(triangles, dtype=np.int64)
        if tris.size == 0:
            tris = np.zeros((0, 3), dtype=np.int64)
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise ValidationError(f"mesh.triangles must be (T, 3), got shape {tris.shape}")
        object.__setattr__(self, "triangles", tris)
        self._validate()

    def _validate(self) -> None:
        nv = len(self.vertices)
        if len(self.triangles):
            lo, hi = self.triangles.min(), self.triangles.max()
            if lo < 0 or hi >= nv:
                raise ValidationError(f"triangle index {hi if hi >= nv else lo} out of range (vertex count {nv})")
            degenerate = (self.triangles[:, 0] == self.triangles[:, 1]) & (
                self.triangles[:, 1] == self.triangles[:, 2]
            )
            if degenerate.any():
                raise ValidationError(f"degenerate triangle at index {int(np.argmax(degenerate))}")

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    def is_normalized(self, eps: float = CUBE_EPS) -> bool:
        if not len(self.vertices):
            return True
        return bool(np.abs(self.vertices).max() <= 0.5 + eps)


@dataclass(frozen=True)
class Skeleton:
    """Joint positions plus parent indices forming a forest (-1 marks roots)."""

    joints: np.ndarray  # (J, 3) float64
    parents: np.ndarray  # (J,) int64, -1 for roots

    def __init__(self, joints, parents):
        object.__setattr__(self, "joints", _as_points(joints, "skeleton.joints"))
        par = np.asarray(parents, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "parents", par)
        self._validate()

    def _validate(self) -> None:
        n = len(self.joints)
        if len(self.parents) != n:
            raise ValidationError(
                f"parents length {len(self.parents)} does not match joint count {n}"
            )
        for i, p in enumerate(self.parents):
            if p == i:
                raise ValidationError(f"joint {i} is its own parent")
            if p < -1 or p >= n:
                raise ValidationError(f"parent index {p} of joint {i} out of range")
        # Walk each parent chain; a chain longer than n joints must contain a cycle.
        for i in range(n):
            steps, j = 0, i
            while j != -1:
                j = int(self.parents[j])
                steps += 1
                if steps > n:
                    raise ValidationError(f"cycle in parent links reachable from joint {i}")

    @property
    def joint_count(self) -> int:
        return len(self.joints)

    def roots(self) -> np.ndarray:
        return np.flatnonzero(self.parents == -1)

    def bones(self) -> np.ndarray:
        """(B, 2) array of (joint, parent) index pairs, one per non-root joint."""
        child = np.flatnonzero(self.parents >= 0)
        return np.stack([child, self.parents[child]], axis=1) if len(child) else np.zeros((0, 2), np.int64)

    def children(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.joint_count)]
        for i, p in enumerate(self.parents):
            if p >= 0:
                out[p].append(i)
        return out


class SkinWeights:
    """Per-vertex sparse convex combinations over joints (partition of unity).

    Entries are stored sparse because the joint count varies wildly between
    asset categories; most vertices reference only a handful of joints.
    """

    __slots__ = ("entries", "joint_count")

    def __init__(
        self,
        entries: Sequence[Sequence[tuple[int, float]]],
        joint_count: int,
        normalize: bool = False,
    ):
        self.joint_count = int(joint_count)
        clean: list[tuple[tuple[int, float], ...]] = []
        for v, pairs in enumerate(entries):
            idx = np.array([p[0] for p in pairs], dtype=np.int64)
            w = np.array([p[1] for p in pairs], dtype=np.float64)
            if len(idx) == 0:
                raise ValidationError(f"vertex {v} has no skin weights")
            if idx.min() < 0 or idx.max() >= self.joint_count:
                raise ValidationError(
                    f"vertex {v} references joint {int(idx.max())} >= joint_count {self.joint_count}"
                )
            if (w < -WEIGHT_SUM_TOLERANCE).any():
                raise ValidationError(f"vertex {v} has a negative weight")
            s = w.sum()
            if normalize:
                if abs(s - 1.0) > WEIGHT_SUM_TOLERANCE:
                    raise ValidationError(
                        f"vertex {v} weight sum {s:.6f} deviates from 1 by more than {WEIGHT_SUM_TOLERANCE}"
                    )
                w = np.clip(w, 0.0, None) / np.clip(w, 0.0, None).sum()
            elif abs(s - 1.0) > WEIGHT_SUM_STRICT or (w < 0).any():
                raise ValidationError(
                    f"vertex {v} weights do not form a partition of unity (sum {s:.8f})"
                )
            clean.append(tuple((int(i), float(x)) for i, x in zip(idx, w)))
        self.entries = tuple(clean)

    def __len__(self) -> int:
        return len(self.entries)

    def to_dense(self) -> np.ndarray:
        """(V, joint_count) dense weight matrix."""
        dense = np.zeros((len(self.entries), self.joint_count), dtype=np.float64)
        for v, pairs in enumerate(self.entries):
            for i, w in pairs:
                dense[v, i] += w
        return dense

    @classmethod
    def from_dense(cls, dense: np.ndarray, prune: float = 0.0) -> "SkinWeights":
        """Build from a dense (V, J) matrix, dropping weights <= prune and renormalizing."""
        dense = np.asarray(dense, dtype=np.float64)
        entries = []
        for row in dense:
            keep = np.flatnonzero(row > prune)
            if len(keep) == 0:
                keep = np.array([int(np.argmax(row))])
            w = row[keep]
            w = w / w.sum()
            entries.append(list(zip(keep.tolist(), w.tolist())))
        return cls(entries, dense.shape[1])


@dataclass(frozen=True)
class Rig:
    """An animatable asset: mesh plus skeleton plus optional skin weights."""

    mesh: Mesh
    skeleton: Skeleton
    skin: SkinWeights | None = None

    def __post_init__(self):
        if self.skin is not None:
            if self.skin.joint_count != self.skeleton.joint_count:
                raise ValidationError(
                    f"skin joint_count {self.skin.joint_count} != skeleton joint count "
                    f"{self.skeleton.joint_count}"
                )
            if len(self.skin) != self.mesh.vertex_count:
                raise ValidationError(
                    f"skin entry count {len(self.skin)} != mesh vertex count {self.mesh.vertex_count}"
                )


@dataclass(frozen=True)
class SparseVoxelGrid:
    """Occupied integer voxel coordinates on an N^3 grid over [-0.5, 0.5]^3."""

    resolution: int
    occupied: np.ndarray  # (V, 3) int64, lexicographically sorted, unique

    def __init__(self, resolution: int, occupied):
        resolution = int(resolution)
        if resolution < 1:
            raise ValidationError(f"resolution must be >= 1, got {resolution}")
        coords = np.asarray(list(occupied) if not isinstance(occupied, np.ndarray) else occupied, dtype=np.int64)
        if coords.size == 0:
            coords = np.zeros((0, 3), dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValidationError(f"occupied must be (V, 3) integer coordinates, got shape {coords.shape}")
        if len(coords) and (coords.min() < 0 or coords.max() >= resolution):
            raise ValidationError("voxel coordinate outside [0, resolution)^3")
        coords = np.unique(coords, axis=0)  # sorts lexicographically, drops duplicates
        object.__setattr__(self, "resolution", resolution)
        object.__setattr__(self, "occupied", coords)

    def __len__(self) -> int:
        return len(self.occupied)

    @property
    def voxel_size(self) -> float:
        """Edge length of one voxel in world units."""
        return 1.0 / self.resolution

    def centers(self) -> np.ndarray:
        """(V, 3) world-space centers of the occupied voxels."""
        return (self.occupied + 0.5) * self.voxel_size - 0.5

    def contains(self, coords: np.ndarray) -> np.ndarray:
        """Boolean membership mask for (K, 3) integer coordinates."""
        keys = set(map(tuple, self.occupied.tolist()))
        return np.array([tuple(c) in keys for c in np.asarray(coords, np.int64).tolist()], dtype=bool)

    def same_grid(self, other: "SparseVoxelGrid") -> bool:
        return (
            self.resolution == other.resolution
            and self.occupied.shape == other.occupied.shape
            and bool(np.array_equal(self.occupied, other.occupied))
        )


def point_to_voxel(points: np.ndarray, resolution: int) -> np.ndarray:
    """Integer voxel coordinates containing the given world points.

    Points exactly on the +0.5 boundary are clamped into the grid.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ijk = np.floor((pts + 0.5) * resolution).astype(np.int64)
    return np.clip(ijk, 0, resolution - 1)


# ---------------------------------------------------------------------------
# Rig JSON I/O
# ---------------------------------------------------------------------------

RIG_FORMAT_VERSION = 1


def round_sig(x: float, digits: int = 9) -> float:
    """Round to `digits` significant decimal digits (serialization contract)."""
    return float(f"{float(x):.{digits}g}")


def _round_nested(values: Iterable) -> list:
    out = []
    for v in values:
        if isinstance(v, (list, tuple, np.ndarray)):
            out.append(_round_nested(v))
        else:
            out.append(round_sig(float(v)))
    return out


def rig_to_dict(rig: Rig) -> dict:
    doc = {
        "version": RIG_FORMAT_VERSION,
        "mesh": {
            "vertices": _round_nested(rig.mesh.vertices.tolist()),
            "triangles": rig.mesh.triangles.tolist(),
        },
        "skeleton": {
            "joints": _round_nested(rig.skeleton.joints.tolist()),
            "parents": rig.skeleton.parents.tolist(),
        },
    }
    if rig.skin is not None:
        doc["skin"] = {
            "entries": [
                [[i, round_sig(w)] for i, w in pairs] for pairs in rig.skin.entries
            ]
        }
    return doc


def rig_from_dict(doc: dict) -> Rig:
    try:
        mesh_doc = doc["mesh"]
        skel_doc = doc["skeleton"]
        mesh = Mesh(mesh_doc["vertices"], mesh_doc["triangles"])
        skeleton = Skeleton(skel_doc["joints"], skel_doc["parents"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"rig document missing required field: {exc}") from exc
    skin = None
    if "skin" in doc and doc["skin"] is not None:
        try:
            entries = doc["skin"]["entries"]
        except (KeyError, TypeError) as exc:
            raise ParseError("rig skin block lacks 'entries'") from exc
        skin = SkinWeights(
            [[(int(i), float(w)) for i, w in pairs] for pairs in entries],
            joint_count=skeleton.joint_count,
            normalize=True,
        )
    return Rig(mesh=mesh, skeleton=skeleton, skin=skin)


def load_rig(path: str | Path) -> Rig:
    """Load and validate a rig JSON file.

    Skin weights within 1e-3 of a partition of unity are silently
    renormalized; larger deviations raise ValidationError.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top-level JSON value must be an object")
    return rig_from_dict(doc)


def save_rig(rig: Rig, path: str | Path) -> None:
    """Write a rig JSON file; round-trips through load_rig at 9 significant digits."""
    doc = rig_to_dict(rig)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def normalize_rig(rig: Rig) -> tuple[Rig, float, np.ndarray]:
    """Center the mesh bounding box at the origin and scale its max extent to 1.

    The same similarity (v + offset) * scale is applied to the skeleton.
    Returns (normalized rig, scale, offset); the transform is invertible via
    v = v' / scale - offset.
    """
    if rig.mesh.vertex_count == 0:
        raise ValidationError("cannot normalize a rig with an empty mesh")
    lo = rig.mesh.vertices.min(axis=0)
    hi = rig.mesh.vertices.max(axis=0)
    extent = float((hi - lo).max())
    scale = 1.0 if extent <= 0.0 else 1.0 / extent
    offset = -(lo + hi) / 2.0
    mesh = Mesh((rig.mesh.vertices + offset) * scale, rig.mesh.triangles)
    skeleton = Skeleton((rig.skeleton.joints + offset) * scale, rig.skeleton.parents)
    return Rig(mesh=mesh, skeleton=skeleton, skin=rig.skin), scale, offset


def rigs_equal(a: Rig, b: Rig, tol: float = 0.0) -> bool:
    """Field-by-field equality; positions compared exactly (tol=0) or within tol."""

    def close(x, y):
        return np.allclose(x, y, rtol=0.0, atol=tol) if tol else np.array_equal(x, y)

    if not close(a.mesh.vertices, b.mesh.vertices):
        return False
    if not np.array_equal(a.mesh.triangles, b.mesh.triangles):
        return False
    if not close(a.skeleton.joints, b.skeleton.joints):
        return False
    if not np.array_equal(a.skeleton.parents, b.skeleton.parents):
        return False
    if (a.skin is None) != (b.skin is None):
        return False
    if a.skin is not None:
        if a.skin.joint_count != b.skin.joint_count or len(a.skin) != len(b.skin):
            return False
        for pa, pb in zip(a.skin.entries, b.skin.entries):
            if len(pa) != len(pb):
                return False
            for (ia, wa), (ib, wb) in zip(pa, pb):
                if ia != ib:
                    return False
                if tol:
                    if abs(wa - wb) > tol:
                        return False
                elif wa != wb:
                    return False
    return True
