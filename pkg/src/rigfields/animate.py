"""Forward kinematics, linear blend skinning, and stochastic pose jitter.

Poses are per-joint unit quaternions in each joint's local frame relative to
the rest pose (rotation pivot at the joint), plus an optional root
translation. Forward kinematics yields rest-to-posed rigid transforms, so the
identity pose maps every point to itself exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Mesh, Rig, Skeleton
from .errors import ParseError, ValidationError

QUAT_IDENTITY = np.array([0.0, 0.0, 0.0, 1.0])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion [x, y, z, w]."""
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = angle / 2.0
    return np.array([*(axis * np.sin(half)), np.cos(half)])


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 * q2 in [x, y, z, w] layout."""
    x1, y1, z1, w1 = q1
    x2, y2, z2, w2 = q2
    return np.array(
        [
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Per-joint local rotations (unit quaternions) plus root translation."""

    rotations: np.ndarray  # (J, 4) as [x, y, z, w]
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(
            self, "root_translation", np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        )
        norms = np.linalg.norm(rot, axis=1)
        if len(norms) and np.abs(norms - 1.0).max() > 1e-9:
            raise ValidationError("pose quaternions must be unit length (within 1e-9)")

    @property
    def joint_count(self) -> int:
        return len(self.rotations)

    @classmethod
    def identity(cls, joint_count: int) -> "Pose":
        return cls(np.tile(QUAT_IDENTITY, (joint_count, 1)))


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """(J, 4, 4) rigid transforms taking rest-space points to posed world space.

    World frames compose down the hierarchy: each joint applies its rest
    offset from the parent and then its local rotation about itself; roots
    additionally apply the pose's root translation. The returned matrices are
    composed with the inverse rest placement, so the identity pose yields
    identity matrices.
    """
    if pose.joint_count != skeleton.joint_count:
        raise ValidationError(
            f"pose has {pose.joint_count} rotations for {skeleton.joint_count} joints"
        )
    n = skeleton.joint_count
    world = np.zeros((n, 4, 4))
    out = np.zeros((n, 4, 4))
    # Parents precede children in traversal order.
    order = []
    children = skeleton.children()
    stack = [int(r) for r in skeleton.roots()][::-1]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    for j in order:
        p = int(skeleton.parents[j])
        local = np.eye(4)
        local[:3, :3] = quat_to_matrix(pose.rotations[j])
        if p < 0:
            local[:3, 3] = skeleton.joints[j] + pose.root_translation
            world[j] = local
        else:
            local[:3, 3] = skeleton.joints[j] - skeleton.joints[p]
            world[j] = world[p] @ local
        out[j] = world[j].copy()
        # Compose with the inverse rest placement: rest-space -> posed space.
        out[j][:3, 3] -= out[j][:3, :3] @ skeleton.joints[j]
    return out


def posed_joint_positions(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """World positions of the joints under the pose."""
    transforms = forward_kinematics(skeleton, pose)
    return np.einsum("jab,jb->ja", transforms[:, :3, :3], skeleton.joints) + transforms[:, :3, 3]


def blend_vertex_transforms(vertices: np.ndarray, weights: np.ndarray, transforms: np.ndarray) -> np.ndarray:
    """Linear blend of rigid transforms over vertices.

    Computed in displacement form v' = v + sum_j w_j (T_j v - v), which is
    exact for identity transforms regardless of weight renormalization noise.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    out = verts.copy()
    for j in range(weights.shape[1]):
        w = weights[:, j]
        active = w != 0.0
        if not active.any():
            continue
        moved = verts[active] @ transforms[j, :3, :3].T + transforms[j, :3, 3]
        out[active] += w[active, None] * (moved - verts[active])
    return out


def skin_mesh(rig: Rig, pose: Pose) -> Mesh:
    """Linear blend skinning of the rig's mesh under the pose."""
    if rig.skin is None:
        raise ValidationError("skin_mesh requires a rig with skin weights")
    transforms = forward_kinematics(rig.skeleton, pose)
    posed = blend_vertex_transforms(rig.mesh.vertices, rig.skin.to_dense(), transforms)
    return Mesh(posed, rig.mesh.triangles)


def perturb_pose(
    skeleton: Skeleton,
    prob: float = 0.8,
    max_angle_deg: float = 60.0,
    seed: int = 0,
) -> Pose:
    """Stochastic pose jitter: each joint is rotated with probability `prob`
    about a uniformly random axis by an angle uniform in [0, max_angle_deg].

    Deterministic given the seed.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValidationError(f"perturbation probability must be in [0, 1], got {prob}")
    if max_angle_deg < 0.0:
        raise ValidationError(f"max angle must be >= 0, got {max_angle_deg}")
    rng = np.random.default_rng(seed)
    rotations = np.tile(QUAT_IDENTITY, (skeleton.joint_count, 1))
    max_rad = np.deg2rad(max_angle_deg)
    for j in range(skeleton.joint_count):
        if rng.random() < prob:
            axis = rng.normal(size=3)
            while np.linalg.norm(axis) < 1e-12:
                axis = rng.normal(size=3)
            angle = rng.uniform(0.0, max_rad)
            rotations[j] = quat_from_axis_angle(axis, angle)
    return Pose(rotations)


# ---------------------------------------------------------------------------
# Pose JSON I/O
# ---------------------------------------------------------------------------


def save_pose(pose: Pose, path: str | Path) -> None:
    doc = {
        "rotations": [[float(x) for x in q] for q in pose.rotations],
        "root_translation": [float(x) for x in pose.root_translation],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_pose(path: str | Path) -> Pose:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    try:
        return Pose(
            np.asarray(doc["rotations"], dtype=np.float64),
            np.asarray(doc.get("root_translation", [0.0, 0.0, 0.0]), dtype=np.float64),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: pose document missing field: {exc}") from exc
