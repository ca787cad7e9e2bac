import numpy as np
import pytest

from rigfields.animate import (
    Pose,
    blend_vertex_transforms,
    forward_kinematics,
    load_pose,
    perturb_pose,
    posed_joint_positions,
    quat_from_axis_angle,
    quat_multiply,
    quat_to_matrix,
    save_pose,
    skin_mesh,
)
from rigfields.core import Mesh, Rig, Skeleton, SkinWeights
from rigfields.errors import ValidationError
from rigfields.syngen import SynthSpec, generate

from conftest import chain_skeleton


def rot_z_90():
    return quat_from_axis_angle([0, 0, 1], np.pi / 2)


class TestForwardKinematics:
    def test_identity_pose_is_identity_transforms(self):
        skel = chain_skeleton([[0, 0, 0], [0.2, 0, 0], [0.4, 0.1, 0]])
        transforms = forward_kinematics(skel, Pose.identity(3))
        assert np.allclose(transforms, np.tile(np.eye(4), (3, 1, 1)))
        assert np.array_equal(posed_joint_positions(skel, Pose.identity(3)), skel.joints)

    def test_root_rotation_moves_child(self):
        skel = chain_skeleton([[0, 0, 0], [1.0, 0, 0]])
        pose = Pose([rot_z_90(), [0, 0, 0, 1.0]])
        pos = posed_joint_positions(skel, pose)
        assert np.allclose(pos[0], [0, 0, 0], atol=1e-12)
        assert np.allclose(pos[1], [0, 1.0, 0], atol=1e-12)

    def test_three_joint_chain_hand_composed(self):
        # joints at x=0,1,2; rotate joints 1 and 2 by 90 deg about z
        skel = chain_skeleton([[0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        q = rot_z_90()
        pose = Pose([[0, 0, 0, 1.0], q, q])
        pos = posed_joint_positions(skel, pose)
        # hand-composed 4x4 matrices
        rz = np.eye(4)
        rz[:3, :3] = quat_to_matrix(q)

        def trans(v):
            t = np.eye(4)
            t[:3, 3] = v
            return t

        g1 = trans([1, 0, 0]) @ rz
        g2 = g1 @ trans([1, 0, 0]) @ rz
        expected_tip = (g2 @ np.array([0.0, 0, 0, 1.0]))[:3]
        assert np.allclose(pos[2], expected_tip, atol=1e-12)
        assert np.allclose(pos[2], [1.0, 1.0, 0.0], atol=1e-12)  # elbow up, tip back

    def test_root_translation(self):
        skel = chain_skeleton([[0.1, 0, 0], [0.3, 0, 0]])
        pose = Pose(np.tile([0, 0, 0, 1.0], (2, 1)), root_translation=[0, 0, 0.5])
        pos = posed_joint_positions(skel, pose)
        assert np.allclose(pos, skel.joints + [0, 0, 0.5])

    def test_length_mismatch_rejected(self):
        skel = chain_skeleton([[0, 0, 0], [0.1, 0, 0]])
        with pytest.raises(ValidationError, match="rotations"):
            forward_kinematics(skel, Pose.identity(3))

    def test_non_unit_quaternion_rejected(self):
        with pytest.raises(ValidationError, match="unit"):
            Pose([[0, 0, 0, 1.1]])

    def test_multi_root_forest(self):
        skel = Skeleton([[0, 0, 0], [0.3, 0, 0], [0.31, 0.1, 0]], [-1, -1, 1])
        pose = Pose([rot_z_90(), [0, 0, 0, 1.0], [0, 0, 0, 1.0]])
        pos = posed_joint_positions(skel, pose)
        assert np.allclose(pos[1], [0.3, 0, 0])  # second root unaffected by first


class TestSkinMesh:
    def test_identity_pose_bit_exact(self):
        rig = generate(SynthSpec(family="chain", joint_count=3, seed=0))
        out = skin_mesh(rig, Pose.identity(3))
        assert np.array_equal(out.vertices, rig.mesh.vertices)
        assert np.array_equal(out.triangles, rig.mesh.triangles)

    def test_single_joint_translation_moves_everything(self):
        mesh = Mesh([[0.1, 0, 0], [0, 0.2, 0], [0, 0, 0.3]], [[0, 1, 2]])
        skel = Skeleton([[0, 0, 0]], [-1])
        rig = Rig(mesh=mesh, skeleton=skel, skin=SkinWeights([[(0, 1.0)]] * 3, 1))
        t = np.array([0.05, -0.02, 0.08])
        pose = Pose([[0, 0, 0, 1.0]], root_translation=t)
        out = skin_mesh(rig, pose)
        assert np.allclose(out.vertices, mesh.vertices + t, atol=1e-15)

    def test_half_weight_blend_of_translation(self):
        # blend rule directly: static joint + translated joint at 0.5/0.5
        verts = np.array([[0.0, 0.0, 0.0]])
        weights = np.array([[0.5, 0.5]])
        transforms = np.tile(np.eye(4), (2, 1, 1))
        t = np.array([0.3, 0.0, -0.1])
        transforms[1, :3, 3] = t
        out = blend_vertex_transforms(verts, weights, transforms)
        assert np.allclose(out[0], t / 2, atol=1e-15)

    def test_one_hot_weights_move_rigidly(self):
        rig = generate(SynthSpec(family="chain", joint_count=4, seed=3))
        dense = rig.skin.to_dense()
        hard = SkinWeights.from_dense(np.eye(4)[dense.argmax(axis=1)])
        rigid_rig = Rig(mesh=rig.mesh, skeleton=rig.skeleton, skin=hard)
        pose = perturb_pose(rig.skeleton, prob=1.0, max_angle_deg=40.0, seed=5)
        out = skin_mesh(rigid_rig, pose)
        posed_joints = posed_joint_positions(rig.skeleton, pose)
        bound = dense.argmax(axis=1)
        d_rest = np.linalg.norm(rig.mesh.vertices - rig.skeleton.joints[bound], axis=1)
        d_posed = np.linalg.norm(out.vertices - posed_joints[bound], axis=1)
        assert np.abs(d_rest - d_posed).max() < 1e-6

    def test_rigid_motion_equivariance(self):
        rig = generate(SynthSpec(family="tree", joint_count=5, seed=2))
        pose = perturb_pose(rig.skeleton, prob=1.0, max_angle_deg=30.0, seed=11)
        r_quat = quat_from_axis_angle([0.3, -0.5, 0.8], 0.9)
        r_mat = quat_to_matrix(r_quat)

        rotated_rig = Rig(
            mesh=Mesh(rig.mesh.vertices @ r_mat.T, rig.mesh.triangles),
            skeleton=Skeleton(rig.skeleton.joints @ r_mat.T, rig.skeleton.parents),
            skin=rig.skin,
        )
        # conjugate local rotations: q' = r q r^-1 (roots and children alike),
        # rotate the root translation
        r_conj = np.array([-r_quat[0], -r_quat[1], -r_quat[2], r_quat[3]])
        rot2 = np.stack([quat_multiply(quat_multiply(r_quat, q), r_conj) for q in pose.rotations])
        rot2 /= np.linalg.norm(rot2, axis=1, keepdims=True)
        pose2 = Pose(rot2, root_translation=r_mat @ pose.root_translation)

        lhs = skin_mesh(rotated_rig, pose2).vertices
        rhs = skin_mesh(rig, pose).vertices @ r_mat.T
        assert np.abs(lhs - rhs).max() < 1e-6

    def test_missing_skin_rejected(self):
        rig = generate(SynthSpec(family="chain", joint_count=3, seed=0))
        bare = Rig(mesh=rig.mesh, skeleton=rig.skeleton)
        with pytest.raises(ValidationError, match="skin"):
            skin_mesh(bare, Pose.identity(3))


class TestPerturbPose:
    def test_prob_zero_identity(self):
        skel = chain_skeleton([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0]])
        pose = perturb_pose(skel, prob=0.0, seed=1)
        assert np.array_equal(pose.rotations, Pose.identity(3).rotations)

    def test_max_angle_zero_identity_rotation(self):
        skel = chain_skeleton([[0, 0, 0], [0.1, 0, 0]])
        pose = perturb_pose(skel, prob=1.0, max_angle_deg=0.0, seed=2)
        angles = 2 * np.arccos(np.clip(pose.rotations[:, 3], -1, 1))
        assert np.abs(angles).max() < 1e-12

    def test_fraction_and_angle_bounds(self):
        joints = np.random.default_rng(0).uniform(-0.4, 0.4, (10_000, 3))
        skel = Skeleton(joints, np.full(10_000, -1))
        pose = perturb_pose(skel, prob=0.8, max_angle_deg=60.0, seed=123)
        angles = 2 * np.arccos(np.clip(pose.rotations[:, 3], -1.0, 1.0))
        perturbed = angles > 1e-12
        frac = perturbed.mean()
        assert 0.78 <= frac <= 0.82
        assert angles.max() <= np.deg2rad(60.0) + 1e-12

    def test_seed_reproducible_bit_exact(self):
        skel = chain_skeleton(np.random.default_rng(1).uniform(-0.4, 0.4, (50, 3)))
        p1 = perturb_pose(skel, seed=42)
        p2 = perturb_pose(skel, seed=42)
        assert np.array_equal(p1.rotations, p2.rotations)
        p3 = perturb_pose(skel, seed=43)
        assert not np.array_equal(p1.rotations, p3.rotations)

    def test_invalid_prob_rejected(self):
        skel = chain_skeleton([[0, 0, 0], [0.1, 0, 0]])
        with pytest.raises(ValidationError, match="probability"):
            perturb_pose(skel, prob=1.5)


class TestPoseIO:
    def test_roundtrip(self, tmp_path):
        skel = chain_skeleton(np.random.default_rng(3).uniform(-0.3, 0.3, (6, 3)))
        pose = perturb_pose(skel, seed=9)
        path = tmp_path / "pose.json"
        save_pose(pose, path)
        loaded = load_pose(path)
        assert np.allclose(loaded.rotations, pose.rotations)
        assert np.allclose(loaded.root_translation, pose.root_translation)
