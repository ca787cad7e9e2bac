import numpy as np
import pytest

from rigfields.core import Rig, rigs_equal
from rigfields.errors import ValidationError
from rigfields.syngen import (
    SynthSpec,
    analytic_skin_weights,
    bone_distances,
    corrupt,
    generate,
)


class TestGenerate:
    def test_two_joint_chain_single_capsule(self):
        rig = generate(SynthSpec(family="chain", joint_count=2, seed=0))
        assert rig.skeleton.joint_count == 2
        assert rig.skeleton.parents.tolist() == [-1, 0]
        # one 12-segment capsule: 2 poles + 6 rings of 12
        assert rig.mesh.vertex_count == 2 + 6 * 12

    def test_quadruped_shape(self):
        rig = generate(SynthSpec(family="quadruped", seed=1))
        skel = rig.skeleton
        assert skel.joint_count >= 13
        assert (skel.parents == -1).sum() == 1
        # exactly four legs hang off the body
        children = skel.children()
        leg_roots = [j for j in range(skel.joint_count) if skel.parents[j] in (0, 2) and j >= 5]
        assert len(leg_roots) == 4

    def test_star_topology(self):
        rig = generate(SynthSpec(family="star", joint_count=6, seed=2))
        assert rig.skeleton.parents.tolist() == [-1, 0, 0, 0, 0, 0]

    def test_deterministic_by_seed(self):
        a = generate(SynthSpec(family="tree", joint_count=9, seed=5))
        b = generate(SynthSpec(family="tree", joint_count=9, seed=5))
        assert rigs_equal(a, b)
        c = generate(SynthSpec(family="tree", joint_count=9, seed=6))
        assert not np.array_equal(a.skeleton.joints, c.skeleton.joints)

    def test_generated_rigs_valid(self):
        for family in ("chain", "star", "tree", "quadruped"):
            rig = generate(SynthSpec(family=family, joint_count=7, seed=3))
            assert rig.mesh.is_normalized()
            sums = rig.skin.to_dense().sum(axis=1)
            assert np.abs(sums - 1.0).max() < 1e-6
            assert Rig(mesh=rig.mesh, skeleton=rig.skeleton, skin=rig.skin)

    def test_min_separation_honored(self):
        rig = generate(SynthSpec(family="tree", joint_count=12, seed=7, min_separation=0.0625))
        d = np.linalg.norm(
            rig.skeleton.joints[:, None, :] - rig.skeleton.joints[None, :, :], axis=2
        )
        np.fill_diagonal(d, np.inf)
        assert d.min() >= 0.0625

    def test_extra_roots_make_forest(self):
        rig = generate(SynthSpec(family="tree", joint_count=9, seed=11, extra_roots=2))
        assert (rig.skeleton.parents == -1).sum() == 3

    def test_sphere_per_joint_style(self):
        rig = generate(SynthSpec(family="star", joint_count=3, seed=0, mesh_style="sphere-per-joint"))
        assert rig.mesh.vertex_count == 3 * (2 + 5 * 12)

    def test_unknown_family_rejected(self):
        with pytest.raises(ValidationError, match="family"):
            SynthSpec(family="squid")


class TestAnalyticSkin:
    def test_partition_of_unity(self):
        rig = generate(SynthSpec(family="tree", joint_count=6, seed=4))
        pts = np.random.default_rng(0).uniform(-0.45, 0.45, (100, 3))
        w = analytic_skin_weights(rig.skeleton, pts, falloff=0.05)
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-12

    def test_on_bone_dominates(self):
        rig = generate(SynthSpec(family="chain", joint_count=2, seed=0))
        skel = rig.skeleton
        midpoint = (skel.joints[0] + skel.joints[1]) / 2
        w = analytic_skin_weights(skel, midpoint[None, :], falloff=0.01)
        # the midpoint lies on joint 1's bone (segment to its parent 0)
        assert w[0, 1] > 0.99

    def test_bone_distances_root_is_point(self):
        from conftest import chain_skeleton

        skel = chain_skeleton([[0.0, 0, 0], [0.4, 0, 0]])
        d = bone_distances(skel, np.array([[-0.2, 0.0, 0.0]]))
        assert d[0, 0] == pytest.approx(0.2)  # root: point distance
        assert d[0, 1] == pytest.approx(0.2)  # bone [0.4 -> 0]: nearest end


class TestCorrupt:
    @pytest.fixture
    def base(self):
        return generate(SynthSpec(family="quadruped", seed=9))

    def test_insert_mid_bone(self, base):
        out = corrupt(base, "insert-mid-bone", seed=1)
        assert out.skeleton.joint_count == base.skeleton.joint_count + 1
        new = out.skeleton.joints[-1]
        # the new joint sits exactly at some original bone midpoint
        mids = [
            (base.skeleton.joints[c] + base.skeleton.joints[p]) / 2
            for c, p in base.skeleton.bones()
        ]
        assert min(np.linalg.norm(new - m) for m in mids) < 1e-12
        # re-linking: the child now points at the inserted joint
        assert (out.skeleton.parents == base.skeleton.joint_count).sum() == 1

    def test_insert_on_two_joint_chain(self):
        rig = generate(SynthSpec(family="chain", joint_count=2, seed=3))
        out = corrupt(rig, "insert-mid-bone", seed=0)
        assert out.skeleton.joint_count == 3
        assert out.skeleton.parents.tolist() == [-1, 2, 0]
        mid = (rig.skeleton.joints[0] + rig.skeleton.joints[1]) / 2
        assert np.allclose(out.skeleton.joints[2], mid)

    def test_duplicate_branch(self, base):
        out = corrupt(base, "duplicate-branch", magnitude=0.01, seed=2)
        added = out.skeleton.joint_count - base.skeleton.joint_count
        assert added >= 1
        for j in out.skeleton.joints[base.skeleton.joint_count :]:
            nearest = np.linalg.norm(base.skeleton.joints - j, axis=1).min()
            assert nearest <= 0.01 + 1e-12

    def test_delete_branch(self, base):
        out = corrupt(base, "delete-branch", seed=3)
        assert out.skeleton.joint_count < base.skeleton.joint_count
        sums = out.skin.to_dense().sum(axis=1)
        assert np.abs(sums - 1.0).max() < 1e-6

    def test_delete_branch_on_chain_inapplicable(self):
        rig = generate(SynthSpec(family="chain", joint_count=5, seed=4))
        with pytest.raises(ValidationError, match="not applicable"):
            corrupt(rig, "delete-branch", seed=0)

    def test_jitter_joints(self, base):
        out = corrupt(base, "jitter-joints", magnitude=0.005, seed=5)
        assert out.skeleton.joint_count == base.skeleton.joint_count
        delta = np.linalg.norm(out.skeleton.joints - base.skeleton.joints, axis=1)
        assert delta.max() > 0.0
        assert delta.max() < 0.05

    def test_corrupt_preserves_validity(self, base):
        for kind in ("insert-mid-bone", "duplicate-branch", "delete-branch", "jitter-joints"):
            out = corrupt(base, kind, magnitude=0.01, seed=6)
            assert Rig(mesh=out.mesh, skeleton=out.skeleton, skin=out.skin)

    def test_deterministic(self, base):
        a = corrupt(base, "duplicate-branch", seed=7)
        b = corrupt(base, "duplicate-branch", seed=7)
        assert rigs_equal(a, b)

    def test_unknown_kind_rejected(self, base):
        with pytest.raises(ValidationError, match="unknown corruption"):
            corrupt(base, "explode")
