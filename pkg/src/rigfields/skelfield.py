"""Skeleton vector fields on sparse voxel supports.

Encoding maps a discrete skeleton to a per-voxel 6-vector (offset to the
nearest joint and to that joint's parent) plus a confidence score that decays
to zero on Voronoi bisectors between joints, where the nearest-joint
assignment flips. Decoding turns a (possibly noisy) field back into a
discrete skeleton: each voxel votes for a joint and a parent position, votes
are sharpened by confidence-weighted mean-shift, merged into clusters, and
clusters are linked into a forest by nearest-parent assignment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import Skeleton, SparseVoxelGrid
from .errors import ParseError, ValidationError

# Votes below this confidence are discarded before clustering; isolated
# low-confidence votes are noise by construction of the field.
VOTE_CONFIDENCE_FLOOR = 0.05

# Denominator guard from the clustering algorithm's mean-shift update.
MEANSHIFT_EPS = 1e-8


@dataclass(frozen=True)
class SkeletonFieldSample:
    """Field value at one occupied voxel."""

    voxel: tuple[int, int, int]
    joint_offset: np.ndarray  # nearest joint minus voxel center
    parent_offset: np.ndarray  # nearest joint's parent minus voxel center
    conf_joint: float
    conf_parent: float


class SkeletonField:
    """Per-voxel samples over a sparse grid, stored as parallel arrays.

    Samples are kept in the grid's canonical (lexicographic) voxel order,
    one sample per occupied voxel.
    """

    __slots__ = ("grid", "joint_offsets", "parent_offsets", "conf_joint", "conf_parent")

    def __init__(self, grid: SparseVoxelGrid, joint_offsets, parent_offsets, conf_joint, conf_parent):
        n = len(grid)
        self.grid = grid
        self.joint_offsets = np.asarray(joint_offsets, dtype=np.float64).reshape(n, 3)
        self.parent_offsets = np.asarray(parent_offsets, dtype=np.float64).reshape(n, 3)
        self.conf_joint = np.asarray(conf_joint, dtype=np.float64).reshape(n)
        self.conf_parent = np.asarray(conf_parent, dtype=np.float64).reshape(n)
        for name, conf in (("joint", self.conf_joint), ("parent", self.conf_parent)):
            if len(conf) and (conf.min() < 0.0 or conf.max() > 1.0):
                raise ValidationError(f"{name} confidence outside [0, 1]")

    def __len__(self) -> int:
        return len(self.grid)

    def samples(self) -> list[SkeletonFieldSample]:
        return [
            SkeletonFieldSample(
                voxel=tuple(int(c) for c in self.grid.occupied[i]),
                joint_offset=self.joint_offsets[i],
                parent_offset=self.parent_offsets[i],
                conf_joint=float(self.conf_joint[i]),
                conf_parent=float(self.conf_parent[i]),
            )
            for i in range(len(self))
        ]


@dataclass(frozen=True)
class ClusterParams:
    """Knobs of the field-to-skeleton clustering.

    bandwidth is in world units. convergence_tol defaults to bandwidth/10 and
    merge_radius to bandwidth/2, matching the clustering algorithm. The
    gate_threshold input is accepted for interface fidelity but has no effect
    on the algorithm body.
    """

    bandwidth: float
    iterations: int = 10
    convergence_tol: float | None = None
    merge_radius: float | None = None
    min_cluster_size: int = 3
    gate_threshold: float = 0.0

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValidationError(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.iterations < 1:
            raise ValidationError(f"iterations must be >= 1, got {self.iterations}")
        if self.min_cluster_size < 1:
            raise ValidationError(f"min_cluster_size must be >= 1, got {self.min_cluster_size}")
        if self.convergence_tol is None:
            object.__setattr__(self, "convergence_tol", self.bandwidth / 10.0)
        if self.merge_radius is None:
            object.__setattr__(self, "merge_radius", self.bandwidth / 2.0)
        if self.merge_radius <= 0:
            raise ValidationError(f"merge_radius must be > 0, got {self.merge_radius}")


def encode_field(skeleton: Skeleton, grid: SparseVoxelGrid) -> SkeletonField:
    """Exact skeleton field of a ground-truth skeleton on the given support.

    Per voxel center v: offset to the nearest joint j*, offset to parent(j*)
    (roots point at themselves), and confidence 1 - |v-j1|^2 / |v-j2|^2 with
    j1/j2 the two nearest joints. The confidence is 1 at joints, 0 where the
    two nearest joints are equidistant, and 1 everywhere for single-joint
    skeletons.
    """
    if skeleton.joint_count == 0:
        raise ValidationError("cannot encode an empty skeleton")
    if len(grid) == 0:
        raise ValidationError("cannot encode a field on an empty grid")
    centers = grid.centers()
    joints = skeleton.joints
    diff = centers[:, None, :] - joints[None, :, :]
    d2 = np.einsum("vjk,vjk->vj", diff, diff)
    nearest = np.argmin(d2, axis=1)
    d1 = d2[np.arange(len(centers)), nearest]
    if skeleton.joint_count == 1:
        conf = np.ones(len(centers))
    else:
        part = np.partition(d2, 1, axis=1)
        second = part[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            conf = 1.0 - np.where(d1 > 0.0, d1 / second, 0.0)
        conf = np.clip(conf, 0.0, 1.0)
    parent_idx = skeleton.parents[nearest]
    parent_pos = np.where(
        (parent_idx >= 0)[:, None], joints[np.clip(parent_idx, 0, None)], joints[nearest]
    )
    joint_offsets = joints[nearest] - centers
    parent_offsets = parent_pos - centers
    return SkeletonField(grid, joint_offsets, parent_offsets, conf, conf)


def confidence_weighted_error(pred: SkeletonField, gt: SkeletonField) -> float:
    """Mean confidence-weighted squared offset error against a reference field.

    Each voxel contributes gt_conf_joint * |d joint_offset|^2 +
    gt_conf_parent * |d parent_offset|^2; zero wherever the reference
    confidence vanishes, so border-ambiguous voxels are ignored.
    """
    if not pred.grid.same_grid(gt.grid):
        raise ValidationError("confidence_weighted_error requires fields on the same grid")
    dj = ((pred.joint_offsets - gt.joint_offsets) ** 2).sum(axis=1)
    dp = ((pred.parent_offsets - gt.parent_offsets) ** 2).sum(axis=1)
    return float(np.mean(gt.conf_joint * dj + gt.conf_parent * dp))


def field_votes(field: SkeletonField) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-voxel joint and parent position votes with their confidences."""
    if len(field) == 0:
        raise ValidationError("cannot derive votes from an empty field")
    centers = field.grid.centers()
    return (
        centers + field.joint_offsets,
        centers + field.parent_offsets,
        field.conf_joint.copy(),
        field.conf_parent.copy(),
    )


def mean_shift_votes(points: np.ndarray, weights: np.ndarray, params: ClusterParams) -> tuple[np.ndarray, int]:
    """Confidence-weighted Gaussian mean-shift, truncated at radius bandwidth.

    Synchronous updates; stops after `iterations` passes or as soon as the
    maximum displacement of a pass drops to convergence_tol (that final
    displacement is discarded, matching the reference loop structure).
    Returns the shifted points and the number of passes executed.
    """
    h = params.bandwidth
    inv_two_h2 = 1.0 / (2.0 * h * h)
    s = points.copy()
    passes = 0
    for _ in range(params.iterations):
        passes += 1
        tree = cKDTree(s)
        pairs = tree.query_pairs(h, output_type="ndarray")
        n = len(s)
        # self term: kernel 1 at distance 0
        num = weights[:, None] * s
        den = weights + MEANSHIFT_EPS
        if len(pairs):
            i, j = pairs[:, 0], pairs[:, 1]
            d2 = ((s[i] - s[j]) ** 2).sum(axis=1)
            k = np.exp(-d2 * inv_two_h2)
            kwi = k * weights[i]
            kwj = k * weights[j]
            den = den + np.bincount(i, weights=kwj, minlength=n)
            den = den + np.bincount(j, weights=kwi, minlength=n)
            for axis in range(3):
                num[:, axis] += np.bincount(i, weights=kwj * s[j, axis], minlength=n)
                num[:, axis] += np.bincount(j, weights=kwi * s[i, axis], minlength=n)
        shifted = num / den[:, None]
        max_shift = float(np.sqrt(((shifted - s) ** 2).sum(axis=1).max()))
        if max_shift <= params.convergence_tol:
            break
        s = shifted
    return s, passes


def merge_labels(points: np.ndarray, radius: float) -> np.ndarray:
    """Connected-component labels of the radius graph over the points."""
    n = len(points)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.arange(n)
    ones = np.ones(len(pairs))
    adj = sparse.coo_matrix((ones, (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return labels


def _break_cycles(parents: np.ndarray, centroids: np.ndarray, masses: np.ndarray) -> np.ndarray:
    """Turn a parent map with possible cycles into a forest.

    For a 2-cycle the member with the larger confidence mass keeps parenthood
    and its own link is re-resolved excluding the partner (falling back to
    root). Longer cycles (rare) are broken by rooting their max-mass member.
    """
    parents = parents.copy()
    m = len(parents)
    for a in range(m):
        b = parents[a]
        if b >= 0 and parents[b] == a and a < b:
            winner, loser = (a, b) if masses[a] >= masses[b] else (b, a)
            parents[loser] = winner
            candidates = [u for u in range(m) if u not in (winner, loser)]
            if candidates:
                d = np.linalg.norm(centroids[candidates] - centroids[winner], axis=1)
                parents[winner] = candidates[int(np.argmin(d))]
            else:
                parents[winner] = -1
    # Generic sweep: any remaining cycle gets its max-mass member rooted.
    for start in range(m):
        seen: dict[int, int] = {}
        j, steps = start, 0
        while j != -1 and j not in seen:
            seen[j] = steps
            j = int(parents[j])
            steps += 1
        if j != -1 and seen.get(j) is not None:
            cycle = [u for u, order in seen.items() if order >= seen[j]]
            top = cycle[int(np.argmax(masses[cycle]))]
            parents[top] = -1
    return parents


def cluster_skeleton(
    votes_joint: np.ndarray,
    votes_parent: np.ndarray,
    conf_joint: np.ndarray,
    conf_parent: np.ndarray,
    params: ClusterParams,
) -> Skeleton:
    """Group joint votes into discrete joints and link them into a forest.

    Pipeline: confidence floor filter -> weighted mean-shift on the joint
    votes -> merge clustering at merge_radius -> confidence-weighted
    centroids of the ORIGINAL votes (joints) and parent votes -> drop
    clusters smaller than min_cluster_size -> parent = nearest joint centroid
    to each cluster's parent estimate; a cluster whose own centroid is
    nearest becomes a root. Output joints are sorted lexicographically.
    """
    j_votes = np.asarray(votes_joint, dtype=np.float64).reshape(-1, 3)
    p_votes = np.asarray(votes_parent, dtype=np.float64).reshape(-1, 3)
    cj = np.asarray(conf_joint, dtype=np.float64).reshape(-1)
    cp = np.asarray(conf_parent, dtype=np.float64).reshape(-1)
    if not (len(j_votes) == len(p_votes) == len(cj) == len(cp)) or len(j_votes) == 0:
        raise ValidationError("votes and confidences must be nonempty and equally long")

    keep = cj >= VOTE_CONFIDENCE_FLOOR
    if not keep.any():
        raise ValidationError("empty skeleton: no votes above the confidence floor")
    j_votes, p_votes, cj, cp = j_votes[keep], p_votes[keep], cj[keep], cp[keep]

    # Mean-shift trajectories depend only on positions, so exact duplicate
    # votes (ubiquitous for clean fields) can be folded into one point with
    # aggregated weight.
    uniq, inverse = np.unique(j_votes, axis=0, return_inverse=True)
    agg_w = np.bincount(inverse, weights=cj, minlength=len(uniq))
    shifted, _ = mean_shift_votes(uniq, agg_w, params)
    labels = merge_labels(shifted, params.merge_radius)[inverse]

    n_clusters = labels.max() + 1
    counts = np.bincount(labels, minlength=n_clusters)
    wj = np.bincount(labels, weights=cj, minlength=n_clusters)
    wp = np.bincount(labels, weights=cp, minlength=n_clusters)
    centroids = np.stack(
        [np.bincount(labels, weights=cj * j_votes[:, a], minlength=n_clusters) for a in range(3)],
        axis=1,
    )
    parent_est = np.stack(
        [np.bincount(labels, weights=cp * p_votes[:, a], minlength=n_clusters) for a in range(3)],
        axis=1,
    )
    plain_mean_p = np.stack(
        [np.bincount(labels, weights=p_votes[:, a], minlength=n_clusters) for a in range(3)],
        axis=1,
    ) / np.maximum(counts, 1)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        centroids = centroids / wj[:, None]
        parent_est = np.where((wp > 0.0)[:, None], parent_est / np.maximum(wp, 1e-300)[:, None], plain_mean_p)

    kept = np.flatnonzero((counts >= params.min_cluster_size) & (wj > 0.0))
    if len(kept) == 0:
        raise ValidationError("empty skeleton: every cluster fell below min_cluster_size")
    centroids, parent_est, masses = centroids[kept], parent_est[kept], wj[kept]

    order = np.lexsort((centroids[:, 2], centroids[:, 1], centroids[:, 0]))
    centroids, parent_est, masses = centroids[order], parent_est[order], masses[order]

    diff = parent_est[:, None, :] - centroids[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    parents = np.argmin(dist, axis=1).astype(np.int64)
    parents[parents == np.arange(len(parents))] = -1
    parents = _break_cycles(parents, centroids, masses)
    return Skeleton(centroids, parents)


def decode_skeleton(field: SkeletonField, params: ClusterParams) -> Skeleton:
    """Recover a discrete skeleton from a (possibly noisy) field."""
    j, p, cj, cp = field_votes(field)
    return cluster_skeleton(j, p, cj, cp, params)


def with_offset_noise(field: SkeletonField, sigma: float, seed: int) -> SkeletonField:
    """Field copy with zero-mean Gaussian noise of std sigma (world units)
    added to both offset channels; confidences are kept."""
    rng = np.random.default_rng(seed)
    return SkeletonField(
        field.grid,
        field.joint_offsets + rng.normal(0.0, sigma, field.joint_offsets.shape),
        field.parent_offsets + rng.normal(0.0, sigma, field.parent_offsets.shape),
        field.conf_joint,
        field.conf_parent,
    )


# ---------------------------------------------------------------------------
# Field JSON I/O
# ---------------------------------------------------------------------------


def save_field(field: SkeletonField, path: str | Path) -> None:
    doc = {
        "resolution": field.grid.resolution,
        "samples": [
            {
                "voxel": [int(c) for c in field.grid.occupied[i]],
                "joint_offset": [float(x) for x in field.joint_offsets[i]],
                "parent_offset": [float(x) for x in field.parent_offsets[i]],
                "conf_j": float(field.conf_joint[i]),
                "conf_p": float(field.conf_parent[i]),
            }
            for i in range(len(field))
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_field(path: str | Path) -> SkeletonField:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    try:
        resolution = int(doc["resolution"])
        samples = doc["samples"]
        voxels = np.array([s["voxel"] for s in samples], dtype=np.int64).reshape(-1, 3)
        joint_offsets = np.array([s["joint_offset"] for s in samples], dtype=np.float64)
        parent_offsets = np.array([s["parent_offset"] for s in samples], dtype=np.float64)
        conf_j = np.array([s["conf_j"] for s in samples], dtype=np.float64)
        conf_p = np.array([s["conf_p"] for s in samples], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: field document missing field: {exc}") from exc
    order = np.lexsort((voxels[:, 2], voxels[:, 1], voxels[:, 0]))
    grid = SparseVoxelGrid(resolution, voxels[order])
    if len(grid) != len(voxels):
        raise ParseError(f"{path}: duplicate voxels in field samples")
    return SkeletonField(grid, joint_offsets[order], parent_offsets[order], conf_j[order], conf_p[order])
