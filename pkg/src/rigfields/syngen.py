"""Procedural synthetic rigs with closed-form skin weights.

Skeleton families: chains, stars, random trees (optionally with extra roots,
giving forests), and a quadruped template. Meshes are capsules along bones
(or spheres at joints), and skin weights follow an analytic softmax falloff
of distance-to-bone, so transfer and fitting tests have exact references.
Corruptions mirror the classic failure constructions: inserting a joint
mid-bone, duplicating a branch with a tiny offset, deleting a side branch,
and jittering joints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Mesh, Rig, Skeleton, SkinWeights
from .errors import ValidationError

FAMILIES = ("chain", "star", "tree", "quadruped")
CORRUPTIONS = ("insert-mid-bone", "duplicate-branch", "delete-branch", "jitter-joints")

# Joints are kept inside this box so capsule surfaces stay within the unit cube.
_JOINT_BOX = 0.42
_SEGMENTS = 12  # tessellation segments around each capsule


@dataclass(frozen=True)
class SynthSpec:
    family: str
    joint_count: int = 5
    bone_length: tuple[float, float] = (0.08, 0.2)
    mesh_style: str = "capsule-per-bone"
    seed: int = 0
    min_separation: float = 0.0
    capsule_radius: float = 0.025
    falloff: float = 0.03
    extra_roots: int = 0  # tree family only: additional components (a forest)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.mesh_style not in ("capsule-per-bone", "sphere-per-joint"):
            raise ValidationError(f"unknown mesh style {self.mesh_style!r}")
        if self.joint_count < 1:
            raise ValidationError("joint_count must be >= 1")
        lo, hi = self.bone_length
        if not (0 < lo <= hi):
            raise ValidationError(f"bone_length range must satisfy 0 < lo <= hi, got {self.bone_length}")
        if self.capsule_radius <= 0 or self.falloff <= 0:
            raise ValidationError("capsule_radius and falloff must be positive")
        if self.extra_roots < 0:
            raise ValidationError("extra_roots must be >= 0")


def _place_joint(
    rng: np.random.Generator,
    anchor: np.ndarray,
    existing: list[np.ndarray],
    bone_range: tuple[float, float],
    min_sep: float,
    tries: int = 400,
) -> np.ndarray:
    for _ in range(tries):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        candidate = anchor + direction * rng.uniform(*bone_range)
        if np.abs(candidate).max() > _JOINT_BOX:
            continue
        if existing and min_sep > 0.0:
            if min(np.linalg.norm(candidate - e) for e in existing) < min_sep:
                continue
        return candidate
    raise ValidationError("could not place a joint satisfying the separation constraints")


def _free_root(rng: np.random.Generator, existing: list[np.ndarray], min_sep: float, tries: int = 400) -> np.ndarray:
    for _ in range(tries):
        candidate = rng.uniform(-_JOINT_BOX * 0.7, _JOINT_BOX * 0.7, size=3)
        if existing and min_sep > 0.0:
            if min(np.linalg.norm(candidate - e) for e in existing) < min_sep:
                continue
        return candidate
    raise ValidationError("could not place a root satisfying the separation constraints")


def _skeleton_chain(spec: SynthSpec, rng: np.random.Generator) -> Skeleton:
    joints = [_free_root(rng, [], spec.min_separation)]
    parents = [-1]
    for i in range(1, spec.joint_count):
        joints.append(_place_joint(rng, joints[-1], joints, spec.bone_length, spec.min_separation))
        parents.append(i - 1)
    return Skeleton(np.array(joints), parents)


def _skeleton_star(spec: SynthSpec, rng: np.random.Generator) -> Skeleton:
    joints = [_free_root(rng, [], spec.min_separation)]
    parents = [-1]
    for _ in range(spec.joint_count - 1):
        joints.append(_place_joint(rng, joints[0], joints, spec.bone_length, spec.min_separation))
        parents.append(0)
    return Skeleton(np.array(joints), parents)


def _skeleton_tree(spec: SynthSpec, rng: np.random.Generator) -> Skeleton:
    joints = [_free_root(rng, [], spec.min_separation)]
    parents = [-1]
    roots_left = spec.extra_roots
    for _ in range(1, spec.joint_count):
        if roots_left > 0 and len(joints) >= 2:
            joints.append(_free_root(rng, joints, max(spec.min_separation, spec.bone_length[0])))
            parents.append(-1)
            roots_left -= 1
            continue
        anchor_idx = int(rng.integers(len(joints)))
        joints.append(_place_joint(rng, joints[anchor_idx], joints, spec.bone_length, spec.min_separation))
        parents.append(anchor_idx)
    return Skeleton(np.array(joints), parents)


def _skeleton_quadruped(spec: SynthSpec, rng: np.random.Generator) -> Skeleton:
    """Spine chain of 5 plus four 2-joint legs (13 joints)."""
    spine_step = rng.uniform(0.1, 0.14)
    joints = []
    parents = []
    x0 = -2.0 * spine_step
    for i in range(5):  # pelvis, spine, chest, neck, head
        joints.append(np.array([x0 + i * spine_step, 0.08 + 0.02 * (i >= 3), 0.0]))
        parents.append(i - 1 if i > 0 else -1)
    for side in (-1.0, 1.0):
        for hip_at in (0, 2):  # legs hang off the pelvis and the chest
            upper = joints[hip_at] + np.array([0.0, -0.1, side * 0.07])
            lower = upper + np.array([rng.uniform(-0.01, 0.01), -0.1, 0.0])
            joints.append(upper)
            parents.append(hip_at)
            joints.append(lower)
            parents.append(len(joints) - 2)
    return Skeleton(np.array(joints), parents)


# ---------------------------------------------------------------------------
# Capsule / sphere meshes
# ---------------------------------------------------------------------------


def _orthonormal_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0])
    if abs(axis @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def _capsule(p0: np.ndarray, p1: np.ndarray, radius: float, offset: int) -> tuple[np.ndarray, np.ndarray]:
    """Capsule from p0 to p1: 12-segment rings, hemispherical caps."""
    axis = p1 - p0
    length = np.linalg.norm(axis)
    if length < 1e-12:
        return _sphere(p0, radius, offset)
    axis = axis / length
    e1, e2 = _orthonormal_frame(axis)
    theta = np.linspace(0.0, 2 * np.pi, _SEGMENTS, endpoint=False)
    circle = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2

    verts = [p0 - radius * axis]
    ring_ids = []
    cap_angles = [-np.pi / 3, -np.pi / 6, 0.0]
    for phi in cap_angles:
        ring = p0 + radius * np.sin(phi) * axis + radius * np.cos(phi) * circle
        ring_ids.append(len(verts))
        verts.extend(ring)
    for phi in [0.0, np.pi / 6, np.pi / 3]:
        ring = p1 + radius * np.sin(phi) * axis + radius * np.cos(phi) * circle
        ring_ids.append(len(verts))
        verts.extend(ring)
    verts.append(p1 + radius * axis)

    tris = []
    top_pole, bottom_pole = 0, len(verts) - 1
    first = ring_ids[0]
    for s in range(_SEGMENTS):
        tris.append((top_pole, first + s, first + (s + 1) % _SEGMENTS))
    for r0, r1 in zip(ring_ids[:-1], ring_ids[1:]):
        for s in range(_SEGMENTS):
            s1 = (s + 1) % _SEGMENTS
            tris.append((r0 + s, r1 + s, r1 + s1))
            tris.append((r0 + s, r1 + s1, r0 + s1))
    last = ring_ids[-1]
    for s in range(_SEGMENTS):
        tris.append((bottom_pole, last + (s + 1) % _SEGMENTS, last + s))
    return np.array(verts), np.array(tris, dtype=np.int64) + offset


def _sphere(center: np.ndarray, radius: float, offset: int) -> tuple[np.ndarray, np.ndarray]:
    theta = np.linspace(0.0, 2 * np.pi, _SEGMENTS, endpoint=False)
    phis = np.linspace(-np.pi / 2, np.pi / 2, 7)[1:-1]
    verts = [center + np.array([0.0, 0.0, -radius])]
    ring_ids = []
    for phi in phis:
        ring_ids.append(len(verts))
        for t in theta:
            verts.append(
                center
                + radius * np.array([np.cos(phi) * np.cos(t), np.cos(phi) * np.sin(t), np.sin(phi)])
            )
    verts.append(center + np.array([0.0, 0.0, radius]))
    tris = []
    bottom, top = 0, len(verts) - 1
    first = ring_ids[0]
    for s in range(_SEGMENTS):
        tris.append((bottom, first + (s + 1) % _SEGMENTS, first + s))
    for r0, r1 in zip(ring_ids[:-1], ring_ids[1:]):
        for s in range(_SEGMENTS):
            s1 = (s + 1) % _SEGMENTS
            tris.append((r0 + s, r1 + s1, r1 + s))
            tris.append((r0 + s, r0 + s1, r1 + s1))
    last = ring_ids[-1]
    for s in range(_SEGMENTS):
        tris.append((top, last + s, last + (s + 1) % _SEGMENTS))
    return np.array(verts), np.array(tris, dtype=np.int64) + offset


def _build_mesh(skeleton: Skeleton, spec: SynthSpec) -> Mesh:
    pieces_v, pieces_t = [], []
    offset = 0
    if spec.mesh_style == "capsule-per-bone":
        bones = skeleton.bones()
        if len(bones) == 0:
            v, t = _sphere(skeleton.joints[0], spec.capsule_radius, offset)
            pieces_v.append(v)
            pieces_t.append(t)
        else:
            covered = set(bones[:, 0].tolist()) | set(bones[:, 1].tolist())
            for child, parent in bones:
                v, t = _capsule(
                    skeleton.joints[parent], skeleton.joints[child], spec.capsule_radius, offset
                )
                pieces_v.append(v)
                pieces_t.append(t)
                offset += len(v)
            for j in range(skeleton.joint_count):  # isolated roots still need surface
                if j not in covered:
                    v, t = _sphere(skeleton.joints[j], spec.capsule_radius, offset)
                    pieces_v.append(v)
                    pieces_t.append(t)
                    offset += len(v)
    else:
        for j in range(skeleton.joint_count):
            v, t = _sphere(skeleton.joints[j], spec.capsule_radius, offset)
            pieces_v.append(v)
            pieces_t.append(t)
            offset += len(v)
    return Mesh(np.concatenate(pieces_v), np.concatenate(pieces_t))


# ---------------------------------------------------------------------------
# Analytic skin
# ---------------------------------------------------------------------------


def bone_distances(skeleton: Skeleton, points: np.ndarray) -> np.ndarray:
    """(P, J) distances from each point to each joint's bone segment.

    Joint j's bone runs from j to its parent; roots degenerate to the joint
    point itself.
    """
    points = np.atleast_2d(points)
    starts = skeleton.joints
    parent_idx = np.where(skeleton.parents >= 0, skeleton.parents, np.arange(skeleton.joint_count))
    ends = skeleton.joints[parent_idx]
    d = ends - starts
    len2 = (d**2).sum(axis=1)
    rel = points[:, None, :] - starts[None, :, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.einsum("pjk,jk->pj", rel, d) / len2[None, :]
    t = np.clip(np.nan_to_num(t), 0.0, 1.0)
    proj = starts[None, :, :] + t[:, :, None] * d[None, :, :]
    return np.sqrt(((points[:, None, :] - proj) ** 2).sum(axis=2))


def analytic_skin_weights(skeleton: Skeleton, points: np.ndarray, falloff: float) -> np.ndarray:
    """Closed-form reference skin: softmax over joints of -distance/falloff."""
    logits = -bone_distances(skeleton, points) / falloff
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def generate(spec: SynthSpec) -> Rig:
    """Deterministic synthetic rig for the given spec."""
    rng = np.random.default_rng(spec.seed)
    if spec.family == "chain":
        skeleton = _skeleton_chain(spec, rng)
    elif spec.family == "star":
        skeleton = _skeleton_star(spec, rng)
    elif spec.family == "tree":
        skeleton = _skeleton_tree(spec, rng)
    else:
        skeleton = _skeleton_quadruped(spec, rng)
    mesh = _build_mesh(skeleton, spec)
    dense = analytic_skin_weights(skeleton, mesh.vertices, spec.falloff)
    skin = SkinWeights.from_dense(dense, prune=1e-9)
    return Rig(mesh=mesh, skeleton=skeleton, skin=skin)


# ---------------------------------------------------------------------------
# Corruptions
# ---------------------------------------------------------------------------


def _descendants(skeleton: Skeleton, root: int) -> list[int]:
    children = skeleton.children()
    out = []
    stack = [root]
    while stack:
        j = stack.pop()
        out.append(j)
        stack.extend(children[j])
    return sorted(out)


def corrupt(rig: Rig, kind: str, magnitude: float = 0.01, seed: int = 0) -> Rig:
    """Structured skeleton corruption with the skin kept valid.

    insert-mid-bone: split a random bone at its midpoint (new joint appended,
    no skin influence). duplicate-branch: append a copy of a random non-root
    subtree offset by `magnitude` (no skin influence). delete-branch: remove
    a random side branch (a subtree whose parent keeps other children),
    folding its skin weights into the attachment joint. jitter-joints: add
    Gaussian noise of std `magnitude` to every joint.
    """
    if kind not in CORRUPTIONS:
        raise ValidationError(f"unknown corruption {kind!r}; expected one of {CORRUPTIONS}")
    rng = np.random.default_rng(seed)
    skel = rig.skeleton
    joints = skel.joints.copy()
    parents = skel.parents.copy()

    if kind == "jitter-joints":
        noisy = joints + rng.normal(0.0, magnitude, joints.shape)
        return Rig(mesh=rig.mesh, skeleton=Skeleton(noisy, parents), skin=rig.skin)

    if kind == "insert-mid-bone":
        bones = skel.bones()
        if len(bones) == 0:
            raise ValidationError("insert-mid-bone is not applicable: skeleton has no bones")
        child, parent = bones[int(rng.integers(len(bones)))]
        mid = (joints[child] + joints[parent]) / 2.0
        new_idx = len(joints)
        joints = np.vstack([joints, mid[None, :]])
        parents = np.append(parents, parent)
        parents[child] = new_idx
        skin = _skin_with_joint_count(rig.skin, new_idx + 1)
        return Rig(mesh=rig.mesh, skeleton=Skeleton(joints, parents), skin=skin)

    if kind == "duplicate-branch":
        non_roots = np.flatnonzero(parents >= 0)
        if len(non_roots) == 0:
            raise ValidationError("duplicate-branch is not applicable: skeleton has no non-root joint")
        branch_root = int(non_roots[int(rng.integers(len(non_roots)))])
        branch = _descendants(skel, branch_root)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        offset = direction * magnitude
        remap = {old: len(joints) + i for i, old in enumerate(branch)}
        new_joints = joints[branch] + offset
        new_parents = []
        for old in branch:
            p = int(parents[old])
            new_parents.append(remap[p] if p in remap else p)
        joints = np.vstack([joints, new_joints])
        parents = np.concatenate([parents, np.array(new_parents, dtype=np.int64)])
        skin = _skin_with_joint_count(rig.skin, len(joints))
        return Rig(mesh=rig.mesh, skeleton=Skeleton(joints, parents), skin=skin)

    # delete-branch
    children = skel.children()
    candidates = [
        j
        for j in range(skel.joint_count)
        if parents[j] >= 0 and len(children[int(parents[j])]) >= 2
    ]
    if not candidates:
        raise ValidationError("delete-branch is not applicable: skeleton has no side branch")
    branch_root = int(candidates[int(rng.integers(len(candidates)))])
    attach = int(parents[branch_root])
    removed = set(_descendants(skel, branch_root))
    keep = [j for j in range(skel.joint_count) if j not in removed]
    remap = {old: new for new, old in enumerate(keep)}
    new_joints = joints[keep]
    new_parents = np.array([remap[int(parents[j])] if int(parents[j]) >= 0 else -1 for j in keep])
    skin = None
    if rig.skin is not None:
        entries = []
        for pairs in rig.skin.entries:
            moved: dict[int, float] = {}
            for i, w in pairs:
                target = remap[i] if i in remap else remap[attach]
                moved[target] = moved.get(target, 0.0) + w
            entries.append(sorted(moved.items()))
        skin = SkinWeights(entries, joint_count=len(keep), normalize=True)
    return Rig(mesh=rig.mesh, skeleton=Skeleton(new_joints, new_parents), skin=skin)


def _skin_with_joint_count(skin: SkinWeights | None, joint_count: int) -> SkinWeights | None:
    if skin is None:
        return None
    return SkinWeights(skin.entries, joint_count=joint_count)
