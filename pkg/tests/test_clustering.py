"""Soft clustering, covariances, kNN graphs and Gaussian feature extraction."""

import numpy as np
import pytest

import cloud4d.autodiff as ad
from cloud4d.clustering import (FEATURE_DIM, cluster_features, covariances,
                                edgeconv_features, gaussian_self_attention,
                                gaussianize, hard_assign, init_feature_weights,
                                knn_graph, soft_cluster)
from cloud4d.gradcheck import check_gradients
from cloud4d.pointcloud import PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(5)


def three_blobs(rng, n_per=100, sigma=0.05):
    centers = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    pts = np.concatenate([c + sigma * rng.standard_normal((n_per, 3))
                          for c in centers])
    return pts, centers


class TestSoftCluster:
    def test_self_centers_fixed_point(self, rng):
        # well-separated points, one Gaussian each: soft rows ~ one-hot
        pts = np.array([[0.0, 0, 0], [3.0, 0, 0], [0, 3.0, 0], [3.0, 3.0, 1.0]])
        mu, soft = soft_cluster(pts, M=4, kappa=50, seed=1)
        assert soft.max(axis=1).min() > 0.99
        # the epsilon in the center update biases each mean by ~eps * |P|
        d = np.abs(mu[:, None, :] - pts[None, :, :]).sum(-1).min(axis=1)
        assert d.max() < 1e-4

    def test_blob_recovery(self, rng):
        pts, centers = three_blobs(rng)
        mu, soft = soft_cluster(pts, M=3, kappa=200, seed=12)
        errs = [np.linalg.norm(mu - c, axis=1).min() for c in centers]
        assert max(errs) < 0.05
        used = {int(np.argmin(np.linalg.norm(mu - c, axis=1))) for c in centers}
        assert len(used) == 3  # each mean claims a distinct centroid

    def test_repeated_point_single_gaussian(self):
        pts = np.tile([[2.0, -1.0, 0.5]], (10, 1))
        mu, soft = soft_cluster(pts, M=1, kappa=1, seed=0)
        # exact up to the epsilon in the denominator of the center update
        np.testing.assert_allclose(mu[0], [2.0, -1.0, 0.5], rtol=0, atol=1e-6)
        np.testing.assert_allclose(soft, np.ones((10, 1)))

    def test_m_exceeds_n(self):
        with pytest.raises(ValueError):
            soft_cluster(np.zeros((2, 3)), M=3, kappa=1, seed=0)

    def test_rows_stochastic(self, rng):
        pts = rng.uniform(size=(60, 3))
        _, soft = soft_cluster(pts, M=5, kappa=30, seed=2)
        np.testing.assert_allclose(soft.sum(axis=1), 1.0, atol=1e-6)
        assert soft.min() >= 0

    def test_center_update_closed_form(self, rng):
        pts = rng.uniform(size=(40, 3))
        mu, soft = soft_cluster(pts, M=4, kappa=25, seed=3)
        expect = (soft.T @ pts) / (soft.T @ np.ones(len(pts)) + 1e-6)[:, None]
        np.testing.assert_array_equal(mu, expect)


class TestHardAssign:
    def test_argmax(self):
        assert hard_assign(np.array([[0.2, 0.5, 0.3]]))[0] == 1

    def test_tie_lowest_index(self):
        assert hard_assign(np.array([[0.5, 0.5]]))[0] == 0

    def test_matches_brute_force(self, rng):
        soft = rng.uniform(size=(50, 6))
        soft /= soft.sum(axis=1, keepdims=True)
        brute = np.array([max(range(6), key=lambda j: soft[i, j])
                          for i in range(50)])
        np.testing.assert_array_equal(hard_assign(soft), brute)


class TestCovariances:
    def test_unit_axes(self):
        pts = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0],
                        [0, -1, 0], [0, 0, 1], [0, 0, -1]])
        sigma = covariances(pts, np.zeros((1, 3)), np.zeros(6, dtype=int),
                            eps_reg=1e-6)
        np.testing.assert_allclose(sigma[0], (1 / 3 + 1e-6) * np.eye(3), atol=1e-12)

    def test_single_member(self):
        sigma = covariances(np.array([[5.0, 5, 5]]), np.array([[5.0, 5, 5]]),
                            np.zeros(1, dtype=int), eps_reg=1e-6)
        np.testing.assert_allclose(sigma[0], 1e-6 * np.eye(3))

    def test_empty_gaussian(self):
        sigma = covariances(np.array([[1.0, 0, 0]]), np.zeros((2, 3)),
                            np.zeros(1, dtype=int), eps_reg=1e-6)
        np.testing.assert_allclose(sigma[1], 1e-6 * np.eye(3))

    def test_spd(self, rng):
        pts = rng.uniform(size=(100, 3))
        mu, soft = soft_cluster(pts, 4, 20, 0)
        sigma = covariances(pts, mu, hard_assign(soft))
        for s in sigma:
            np.testing.assert_allclose(s, s.T, atol=1e-12)
            assert np.linalg.eigvalsh(s).min() >= 1e-6 * 0.999


class TestKnnGraph:
    def test_collinear_tie(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        g = knn_graph(pts, k=1)
        np.testing.assert_array_equal(g.idx[:, 0], [1, 0, 1])

    def test_full_neighborhood(self, rng):
        pts = rng.uniform(size=(6, 3))
        g = knn_graph(pts, k=5)
        for i in range(6):
            assert set(g.idx[i]) == set(range(6)) - {i}

    def test_matches_brute_force(self, rng):
        pts = rng.uniform(size=(64, 3))
        g = knn_graph(pts, k=7)
        d = ((pts[:, None] - pts[None]) ** 2).sum(-1)
        np.fill_diagonal(d, np.inf)
        brute = np.argsort(d, axis=1, kind="stable")[:, :7]
        np.testing.assert_array_equal(g.idx, brute)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            knn_graph(np.zeros((1, 3)), k=1)


class TestEdgeConv:
    def test_duplicate_points_equal_zero_edge(self, rng):
        w = init_feature_weights(rng)
        pts = np.tile([[0.5, 0.5, 0.5]], (2, 1))
        g = knn_graph(pts, k=1)
        out = edgeconv_features(pts, g, w)
        # degenerate features equal the transform of concat(0, x): both rows equal
        np.testing.assert_allclose(out.data[0], out.data[1], atol=1e-12)
        single = edgeconv_features(pts[:1], None, w)
        np.testing.assert_allclose(out.data[0], single.data[0], atol=1e-12)

    def test_output_shape(self, rng):
        w = init_feature_weights(rng)
        pts = rng.uniform(size=(9, 3))
        out = edgeconv_features(pts, knn_graph(pts, 4), w)
        assert out.shape == (9, FEATURE_DIM)

    def test_translation_moves_only_center_channels(self, rng):
        # first block input = concat(x_i - x_j, x_i): translating the cloud
        # must leave the difference channels unchanged
        pts = rng.uniform(size=(8, 3))
        shift = np.array([10.0, -4.0, 2.0])
        g = knn_graph(pts, 3)
        diff_a = pts[:, None, :] - pts[g.idx]
        moved = pts + shift
        diff_b = moved[:, None, :] - moved[g.idx]
        np.testing.assert_allclose(diff_a, diff_b, atol=1e-9)
        center_a = np.broadcast_to(pts[:, None, :], diff_a.shape)
        center_b = np.broadcast_to(moved[:, None, :], diff_b.shape)
        assert np.abs(center_a - center_b).min() > 1.0

    def test_gradients(self, rng):
        w = init_feature_weights(rng)
        pts = rng.uniform(size=(7, 3))
        g = knn_graph(pts, 3)
        probe = ad.constant(rng.standard_normal((7, FEATURE_DIM)))
        report = check_gradients(
            lambda: ad.tsum(edgeconv_features(pts, g, w) * probe),
            [t for blk in w.blocks for t in blk])
        assert report.max_rel_err < 1e-5

    def test_dropout_only_in_training(self, rng):
        w = init_feature_weights(rng)
        pts = rng.uniform(size=(6, 3))
        g = knn_graph(pts, 2)
        a = edgeconv_features(pts, g, w, training=False, dropout=0.5)
        b = edgeconv_features(pts, g, w, training=False, dropout=0.5)
        np.testing.assert_array_equal(a.data, b.data)
        r1 = np.random.default_rng(0)
        c = edgeconv_features(pts, g, w, training=True, dropout=0.5, rng=r1)
        assert not np.allclose(a.data, c.data)


class TestSelfAttention:
    def test_single_row_identity(self, rng):
        w = init_feature_weights(rng)
        f = ad.constant(rng.standard_normal((1, FEATURE_DIM)))
        pooled = gaussian_self_attention(f, w.wq, w.wk, w.wv)
        np.testing.assert_allclose(pooled.data, (f.data @ w.wv.data)[0], atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        w = init_feature_weights(rng)
        f = ad.constant(rng.standard_normal((5, FEATURE_DIM)))
        _, rows = gaussian_self_attention(f, w.wq, w.wk, w.wv, return_rows=True)
        np.testing.assert_allclose(rows.data.sum(axis=1), 1.0, atol=1e-9)

    def test_zero_query_key_is_mean_pool(self, rng):
        w = init_feature_weights(rng)
        zq = ad.constant(np.zeros((FEATURE_DIM, FEATURE_DIM)))
        f = ad.constant(rng.standard_normal((6, FEATURE_DIM)))
        pooled = gaussian_self_attention(f, zq, zq, w.wv)
        expect = (f.data @ w.wv.data).mean(axis=0)
        np.testing.assert_allclose(pooled.data, expect, atol=1e-12)


class TestGaussianize:
    def test_composite_invariants(self, rng):
        pts, _ = three_blobs(rng)
        state = gaussianize(PointCloud(pts), M=3, kappa=200, seed=12,
                            weights=init_feature_weights(rng))
        np.testing.assert_allclose(state.soft.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(state.assign, hard_assign(state.soft))
        assert state.feat.shape == (3, FEATURE_DIM)
        for s in state.sigma:
            assert np.linalg.eigvalsh(s).min() > 0

    def test_single_gaussian_centroid(self, rng):
        pts = rng.uniform(size=(50, 3))
        state = gaussianize(PointCloud(pts), M=1, kappa=100, seed=0,
                            weights=init_feature_weights(rng))
        np.testing.assert_allclose(state.mu[0], pts.mean(axis=0), atol=1e-4)
        assert (state.assign == 0).all()

    def test_permutation_equivariance(self, rng):
        pts, _ = three_blobs(rng, n_per=40)
        w = init_feature_weights(rng)
        a = gaussianize(PointCloud(pts), M=3, kappa=100, seed=4, weights=w)
        perm = rng.permutation(len(pts))
        b = gaussianize(PointCloud(pts[perm]), M=3, kappa=100, seed=4, weights=w)
        # value-ordered center init makes the draw permutation independent
        np.testing.assert_allclose(a.mu, b.mu, atol=1e-9)
        np.testing.assert_allclose(a.sigma, b.sigma, atol=1e-9)
        np.testing.assert_array_equal(a.assign[perm], b.assign)
