import numpy as np
import pytest

from rigfields.bvh import (
    brute_force_closest,
    build_bvh,
    closest_point,
    closest_points,
    load_bvh,
    save_bvh,
    transfer_skin_bvh,
    transfer_skin_nn,
)
from rigfields.core import Mesh, Rig, Skeleton, SkinWeights
from rigfields.errors import ParseError, ValidationError
from rigfields.syngen import SynthSpec, analytic_skin_weights, generate

from conftest import chain_skeleton, make_uv_sphere, oracle_closest_point_triangles


class TestClosestPointExamples:
    def test_orthogonal_projection_onto_interior(self):
        mesh = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        hit = closest_point(build_bvh(mesh), [0.25, 0.25, 1.0])
        assert hit.triangle_index == 0
        assert np.allclose(hit.point, [0.25, 0.25, 0.0])
        assert hit.distance == pytest.approx(1.0)
        assert np.allclose(hit.barycentric, [0.5, 0.25, 0.25])

    def test_query_at_mesh_vertex(self):
        mesh = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        hit = closest_point(build_bvh(mesh), [1.0, 0.0, 0.0])
        assert hit.distance == pytest.approx(0.0, abs=1e-15)
        assert np.allclose(hit.barycentric, [0.0, 1.0, 0.0])

    def test_barycentric_reconstructs_point(self):
        rng = np.random.default_rng(4)
        mesh = make_uv_sphere([0, 0, 0], 0.4)
        bvh = build_bvh(mesh)
        queries = rng.uniform(-0.5, 0.5, (100, 3))
        _, idx, pts, bary = closest_points(bvh, queries)
        corners = mesh.vertices[mesh.triangles[idx]]
        recon = np.einsum("qc,qck->qk", bary, corners)
        assert np.abs(recon - pts).max() < 1e-12
        assert np.abs(bary.sum(axis=1) - 1.0).max() < 1e-9
        assert bary.min() >= 0.0


class TestScalarPrimitiveAgainstVectorizedOracle:
    def test_random_triangles(self):
        rng = np.random.default_rng(7)
        tris = rng.uniform(-1, 1, (300, 3, 3))
        mesh_like = tris.reshape(-1, 3)
        mesh = Mesh(mesh_like, np.arange(900).reshape(-1, 3))
        for _ in range(40):
            q = rng.uniform(-1.5, 1.5, 3)
            d_lib, idx, pts, _ = brute_force_closest(mesh, q)
            d_orc, pts_orc = oracle_closest_point_triangles(tris, q)
            assert abs(d_lib[0] - d_orc.min()) < 1e-9
            assert np.linalg.norm(pts[0] - pts_orc[np.argmin(d_orc)]) < 1e-7


class TestBuild:
    def test_single_triangle_single_leaf(self):
        mesh = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        bvh = build_bvh(mesh)
        assert bvh.node_count == 1
        assert bvh.count[0] == 1

    def test_two_disjoint_triangles_boxes(self):
        verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5], [6, 5, 5], [5, 6, 5]]
        mesh = Mesh(verts, [[0, 1, 2], [3, 4, 5]])
        bvh = build_bvh(mesh)
        # 2 triangles fit in one leaf by default; force a split with leaf audit instead
        assert np.allclose(bvh.bounds_min[0], [0, 0, 0])
        assert np.allclose(bvh.bounds_max[0], [6, 6, 5])

    def test_leaves_partition_triangles(self):
        mesh = make_uv_sphere([0, 0, 0], 0.45, n_theta=100, n_phi=50)
        assert len(mesh.triangles) > 9000
        bvh = build_bvh(mesh)
        seen = []
        for node in range(bvh.node_count):
            if bvh.count[node] > 0:
                assert bvh.left[node] == -1 and bvh.right[node] == -1
                seen.extend(range(bvh.start[node], bvh.start[node] + bvh.count[node]))
            else:
                assert bvh.left[node] >= 0 and bvh.right[node] >= 0
        assert sorted(seen) == list(range(len(mesh.triangles)))
        assert sorted(bvh.perm.tolist()) == list(range(len(mesh.triangles)))

    def test_node_boxes_contain_subtree_triangles(self):
        mesh = make_uv_sphere([0, 0, 0], 0.3, n_theta=16, n_phi=8)
        bvh = build_bvh(mesh)

        def subtree_leaf_ranges(node):
            if bvh.count[node] > 0:
                return [(bvh.start[node], bvh.count[node])]
            return subtree_leaf_ranges(bvh.left[node]) + subtree_leaf_ranges(bvh.right[node])

        for node in range(bvh.node_count):
            for start, count in subtree_leaf_ranges(node):
                pts = bvh.tris_flat[start : start + count].reshape(-1, 3)
                assert (pts >= bvh.bounds_min[node] - 1e-12).all()
                assert (pts <= bvh.bounds_max[node] + 1e-12).all()

    def test_empty_mesh_rejected(self):
        with pytest.raises(ValidationError):
            build_bvh(Mesh([[0, 0, 0]], []))

    def test_build_deterministic(self):
        mesh = make_uv_sphere([0, 0, 0], 0.4, n_theta=30, n_phi=15)
        a, b = build_bvh(mesh), build_bvh(mesh)
        assert np.array_equal(a.perm, b.perm)
        assert np.array_equal(a.bounds_min, b.bounds_min)


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_500_queries_match_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        rig = generate(SynthSpec(family="tree", joint_count=4 + seed, seed=seed))
        mesh = rig.mesh
        bvh = build_bvh(mesh)
        queries = rng.uniform(-0.6, 0.6, (500, 3))
        d_bvh, i_bvh, _, _ = closest_points(bvh, queries)
        d_brute, i_brute, _, _ = brute_force_closest(mesh, queries)
        assert np.array_equal(i_bvh, i_brute)
        assert np.abs(d_bvh - d_brute).max() <= 1e-9


class TestTransfer:
    @pytest.fixture
    def skinned_capsule(self):
        return generate(SynthSpec(family="chain", joint_count=3, seed=6))

    def test_identity_transfer_bvh(self, skinned_capsule):
        out = transfer_skin_bvh(skinned_capsule, skinned_capsule.mesh)
        got = out.to_dense()
        want = skinned_capsule.skin.to_dense()
        assert np.abs(got - want).max() < 1e-9

    def test_identity_transfer_nn(self, skinned_capsule):
        out = transfer_skin_nn(skinned_capsule, skinned_capsule.mesh)
        assert np.abs(out.to_dense() - skinned_capsule.skin.to_dense()).max() < 1e-12

    def test_edge_midpoint_blends_half(self):
        # source: one triangle with one-hot weights on joints 0/1/1
        mesh = Mesh([[0, 0, 0], [0.4, 0, 0], [0, 0.4, 0]], [[0, 1, 2]])
        skel = chain_skeleton([[0, 0, 0], [0.4, 0, 0]])
        skin = SkinWeights([[(0, 1.0)], [(1, 1.0)], [(1, 1.0)]], 2)
        src = Rig(mesh=mesh, skeleton=skel, skin=skin)
        dst = Mesh([[0.2, 0.0, 0.1]], [])  # projects onto the edge v0-v1 midpoint
        out = transfer_skin_bvh(src, dst)
        assert out.to_dense()[0] == pytest.approx([0.5, 0.5], abs=1e-12)

    def test_single_vertex_source_nn(self):
        mesh = Mesh([[0.1, 0.1, 0.1]], [])
        skel = Skeleton([[0, 0, 0]], [-1])
        src = Rig(mesh=mesh, skeleton=skel, skin=SkinWeights([[(0, 1.0)]], 1))
        dst = Mesh([[0.3, 0, 0], [-0.2, 0.1, 0]], [])
        out = transfer_skin_nn(src, dst)
        assert out.to_dense().tolist() == [[1.0], [1.0]]

    def test_missing_skin_rejected(self, skinned_capsule):
        bare = Rig(mesh=skinned_capsule.mesh, skeleton=skinned_capsule.skeleton)
        with pytest.raises(ValidationError, match="skin"):
            transfer_skin_bvh(bare, skinned_capsule.mesh)
        with pytest.raises(ValidationError, match="skin"):
            transfer_skin_nn(bare, skinned_capsule.mesh)

    def test_partition_of_unity_preserved(self, skinned_capsule):
        rng = np.random.default_rng(2)
        dst = Mesh(rng.uniform(-0.45, 0.45, (300, 3)), [])
        for skin in (transfer_skin_bvh(skinned_capsule, dst), transfer_skin_nn(skinned_capsule, dst)):
            sums = skin.to_dense().sum(axis=1)
            assert np.abs(sums - 1.0).max() <= 1e-6

    def test_uneven_sampling_bvh_beats_nn(self):
        # dense reference sphere, decimated source: barycentric interpolation
        # at the nearest surface point stays closer to the analytic weights
        # than copying the nearest vertex
        skel = chain_skeleton([[0, -0.3, 0], [0, 0.3, 0]])
        falloff = 0.1
        src_mesh = make_uv_sphere([0, 0, 0], 0.45, n_theta=12, n_phi=6)
        src_skin = SkinWeights.from_dense(analytic_skin_weights(skel, src_mesh.vertices, falloff))
        src = Rig(mesh=src_mesh, skeleton=skel, skin=src_skin)
        dst_mesh = make_uv_sphere([0, 0, 0], 0.45, n_theta=48, n_phi=24)
        want = analytic_skin_weights(skel, dst_mesh.vertices, falloff)
        err_bvh = np.abs(transfer_skin_bvh(src, dst_mesh).to_dense() - want).sum(axis=1).mean()
        err_nn = np.abs(transfer_skin_nn(src, dst_mesh).to_dense() - want).sum(axis=1).mean()
        assert err_bvh < err_nn


class TestConcurrencyAndScaling:
    def test_concurrent_queries_match_serial(self):
        from concurrent.futures import ThreadPoolExecutor

        rng = np.random.default_rng(6)
        mesh = make_uv_sphere([0, 0, 0], 0.4, n_theta=40, n_phi=20)
        bvh = build_bvh(mesh)
        chunks = [rng.uniform(-0.5, 0.5, (200, 3)) for _ in range(8)]
        serial = [closest_points(bvh, c) for c in chunks]
        with ThreadPoolExecutor(max_workers=4) as pool:
            threaded = list(pool.map(lambda c: closest_points(bvh, c), chunks))
        for (d1, i1, _, _), (d2, i2, _, _) in zip(serial, threaded):
            assert np.array_equal(d1, d2)
            assert np.array_equal(i1, i2)

    def test_query_cost_sublinear_in_triangles(self):
        import time

        rng = np.random.default_rng(8)
        queries = rng.uniform(-0.6, 0.6, (2000, 3))
        times = {}
        for n_theta, n_phi, label in ((36, 16, 1_000), (112, 46, 10_000), (354, 144, 100_000)):
            mesh = make_uv_sphere([0, 0, 0], 0.45, n_theta=n_theta, n_phi=n_phi)
            bvh = build_bvh(mesh)
            closest_points(bvh, queries[:5])  # warm
            best = np.inf
            for _ in range(3):
                t0 = time.perf_counter()
                closest_points(bvh, queries)
                best = min(best, time.perf_counter() - t0)
            times[label] = best
        # 100x more triangles must cost far less than 100x the query time;
        # generous bound keeps the check robust on noisy machines
        assert times[100_000] < 20 * times[1_000], times


class TestSerialization:
    def test_roundtrip_identical_queries(self, tmp_path):
        rng = np.random.default_rng(3)
        mesh = make_uv_sphere([0, 0, 0], 0.4, n_theta=24, n_phi=12)
        bvh = build_bvh(mesh)
        path = tmp_path / "cache.rbvh"
        save_bvh(bvh, path)
        loaded = load_bvh(path, mesh)
        q = rng.uniform(-0.5, 0.5, (50, 3))
        d1, i1, p1, b1 = closest_points(bvh, q)
        d2, i2, p2, b2 = closest_points(loaded, q)
        assert np.array_equal(i1, i2)
        assert np.array_equal(d1, d2)
        assert np.array_equal(p1, p2)

    def test_wrong_mesh_rejected(self, tmp_path):
        mesh = make_uv_sphere([0, 0, 0], 0.4)
        other = make_uv_sphere([0, 0, 0], 0.3)
        path = tmp_path / "cache.rbvh"
        save_bvh(build_bvh(mesh), path)
        with pytest.raises(ValidationError, match="different mesh"):
            load_bvh(path, other)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.rbvh"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ParseError, match="not a BVH"):
            load_bvh(path, make_uv_sphere([0, 0, 0], 0.4))
