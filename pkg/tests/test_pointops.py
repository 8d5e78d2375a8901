"""Geometry tests against brute-force oracles."""

import numpy as np
import pytest

from pointmpm import autodiff as ad
from pointmpm import pointops as po


def fps_oracle(points, g, start):
    """Greedy FPS by explicit scan, ties to lowest index."""
    n = len(points)
    picks = [start]
    for _ in range(g - 1):
        best, best_d = None, -1.0
        for i in range(n):
            d = min(np.sum((points[i] - points[j]) ** 2) for j in picks)
            if d > best_d + 1e-15:
                best, best_d = i, d
        picks.append(best)
    return np.array(picks)


def knn_oracle(points, query, k):
    d = np.array([np.sum((p - query) ** 2) for p in points])
    order = sorted(range(len(points)), key=lambda i: (d[i], i))
    return np.array(order[:k])


def chamfer_oracle(a, b):
    d_ab = np.mean([min(np.sum((x - y) ** 2) for y in b) for x in a])
    d_ba = np.mean([min(np.sum((x - y) ** 2) for y in a) for x in b])
    return d_ab + d_ba


class TestNormalization:
    def test_ingest_invariants(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            cloud = po.PointCloud.ingest(rng.normal(size=(50, 3)) * 7 + 3)
            assert np.linalg.norm(cloud.points.mean(axis=0)) < 1e-5
            assert abs(np.linalg.norm(cloud.points, axis=1).max() - 1.0) < 1e-5

    def test_rejects_nonfinite(self):
        pts = np.ones((4, 3))
        pts[0, 0] = np.nan
        with pytest.raises(ValueError):
            po.PointCloud.ingest(pts)


class TestFPS:
    def test_line_farthest_forced(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
        np.testing.assert_array_equal(po.farthest_point_sample(pts, 2, 0), [0, 3])

    def test_g_equals_n_is_exhaustive(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(7, 3))
        idx = po.farthest_point_sample(pts, 7, 2)
        assert sorted(idx) == list(range(7))
        np.testing.assert_array_equal(idx, fps_oracle(pts, 7, 2))

    def test_cube_corners_match_oracle(self):
        corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
        np.testing.assert_array_equal(po.farthest_point_sample(corners, 4, 0),
                                      fps_oracle(corners, 4, 0))

    def test_random_instances_match_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n = int(rng.integers(4, 20))
            pts = rng.normal(size=(n, 3))
            g = int(rng.integers(1, n + 1))
            start = int(rng.integers(n))
            np.testing.assert_array_equal(po.farthest_point_sample(pts, g, start),
                                          fps_oracle(pts, g, start))

    def test_permutation_covariance(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(12, 3))
        idx = po.farthest_point_sample(pts, 6, 4)
        perm = rng.permutation(12)
        # points2[i] == points[perm[i]]; the same geometric picks come out
        inv = np.argsort(perm)
        idx2 = po.farthest_point_sample(pts[perm], 6, inv[4])
        np.testing.assert_array_equal(perm[idx2], idx)

    def test_fps_radii_non_increasing(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(30, 3))
        idx = po.farthest_point_sample(pts, 12, 0)
        radii = []
        for i in range(1, len(idx)):
            d = min(np.sum((pts[idx[i]] - pts[idx[j]]) ** 2) for j in range(i))
            radii.append(d)
        assert all(radii[i] >= radii[i + 1] - 1e-12 for i in range(len(radii) - 1))

    def test_g_too_large(self):
        with pytest.raises(ValueError):
            po.farthest_point_sample(np.zeros((3, 3)), 4, 0)


class TestKNN:
    def test_query_in_cloud_finds_itself(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(10, 3))
        idx = po.knn(pts, pts[4:5], 1)
        assert idx[0, 0] == 4

    def test_collinear_end(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [5, 0, 0]], dtype=float)
        np.testing.assert_array_equal(po.knn(pts, pts[0:1], 2)[0], [0, 1])

    def test_k_equals_n_distance_order(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(8, 3))
        q = rng.normal(size=(1, 3))
        np.testing.assert_array_equal(po.knn(pts, q, 8)[0], knn_oracle(pts, q[0], 8))

    def test_random_instances_match_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(3, 25))
            pts = rng.normal(size=(n, 3))
            qs = rng.normal(size=(3, 3))
            k = int(rng.integers(1, n + 1))
            got = po.knn(pts, qs, k)
            for qi in range(3):
                np.testing.assert_array_equal(got[qi], knn_oracle(pts, qs[qi], k))

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            po.knn(np.zeros((2, 3)), np.zeros((1, 3)), 3)


class TestBuildPatches:
    def test_reconstruction_identity(self):
        rng = np.random.default_rng(8)
        cloud = po.PointCloud.ingest(rng.normal(size=(40, 3)))
        ps = po.build_patches(cloud, 8, 5)
        for i in range(ps.g):
            restored = ps.patches[i] + ps.centers[i]
            for point in restored:
                assert np.min(np.linalg.norm(cloud.points - point, axis=1)) < 1e-9
        # centers are cloud points
        for c in ps.centers:
            assert np.min(np.linalg.norm(cloud.points - c, axis=1)) < 1e-12

    def test_n_equals_g_k1_zero_patches(self):
        rng = np.random.default_rng(9)
        cloud = po.PointCloud.ingest(rng.normal(size=(6, 3)))
        ps = po.build_patches(cloud, 6, 1)
        np.testing.assert_allclose(ps.patches, 0.0, atol=1e-12)

    def test_desk_config_matches_oracle_composition(self):
        rng = np.random.default_rng(10)
        cloud = po.PointCloud.ingest(rng.normal(size=(256, 3)))
        ps = po.build_patches(cloud, 16, 16)
        assert ps.patches.shape == (16, 16, 3)
        centers_idx = fps_oracle(cloud.points, 16, 0)
        np.testing.assert_array_equal(ps.center_indices, centers_idx)
        for i in range(16):
            nbrs = knn_oracle(cloud.points, cloud.points[centers_idx[i]], 16)
            np.testing.assert_allclose(
                ps.patches[i], cloud.points[nbrs] - cloud.points[centers_idx[i]], atol=1e-12)


class TestBlockMask:
    def test_forced_quarter_ratio(self):
        rng = np.random.default_rng(11)
        centers = rng.normal(size=(16, 3))
        for _ in range(50):
            m = po.block_mask(centers, (0.25, 0.25), rng)
            assert len(m.indices) == 4
            nearest = po.knn(centers, centers[m.seed_index:m.seed_index + 1], 4)[0]
            assert set(m.indices) == set(nearest)

    def test_invariants_over_draws(self):
        rng = np.random.default_rng(12)
        centers = rng.normal(size=(16, 3))
        for _ in range(300):
            m = po.block_mask(centers, (0.25, 0.45), rng)
            ratio = len(m.indices) / 16
            assert 0.25 <= ratio <= 0.45
            assert m.seed_index in m.indices
            nearest = po.knn(centers, centers[m.seed_index:m.seed_index + 1], len(m.indices))[0]
            assert set(m.indices) == set(nearest)

    def test_deterministic_given_seed(self):
        centers = np.random.default_rng(13).normal(size=(12, 3))
        a = po.block_mask(centers, rng=np.random.default_rng(99))
        b = po.block_mask(centers, rng=np.random.default_rng(99))
        np.testing.assert_array_equal(a.indices, b.indices)
        assert a.seed_index == b.seed_index

    def test_small_g_rejected(self):
        centers = np.zeros((3, 3))
        with pytest.raises(ValueError):
            po.block_mask(centers, (0.25, 0.45), np.random.default_rng(0))


class TestChamfer:
    def test_identity_zero(self):
        rng = np.random.default_rng(14)
        a = rng.normal(size=(6, 3))
        assert po.chamfer(a, a).item() == 0.0

    def test_analytic_singletons(self):
        assert po.chamfer(np.zeros((1, 3)), np.array([[1.0, 0, 0]])).item() == pytest.approx(2.0)

    def test_symmetric_nonnegative(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            a = rng.normal(size=(5, 3))
            b = rng.normal(size=(7, 3))
            ab = po.chamfer(a, b).item()
            ba = po.chamfer(b, a).item()
            assert ab == ba
            assert ab >= 0.0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(16)
        for _ in range(10):
            a = rng.normal(size=(5, 3))
            b = rng.normal(size=(5, 3))
            assert po.chamfer(a, b).item() == pytest.approx(chamfer_oracle(a, b), abs=1e-6)

    def test_differentiable_both_sides(self):
        rng = np.random.default_rng(17)
        b = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=(5, 3))}
        expr = ad.Expression(lambda v: po.chamfer(v["a"], v["b"]), ["a", "b"])
        assert ad.grad_check(expr, b, eps=1e-6) < 1e-5

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            po.chamfer(np.zeros((0, 3)), np.zeros((1, 3)))
