"""Cloud ingestion, sampling, outlier removal, timestamp normalization."""

import numpy as np
import pytest

from cloud4d.io import ParseError, load_cloud, save_cloud, save_flow
from cloud4d.pointcloud import (PointCloud, Sequence, normalize_timestamps,
                                remove_outliers, sample_points)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestXyz:
    def test_three_line_file(self, tmp_path):
        path = tmp_path / "tri.xyz"
        path.write_text("0 0 0\n1 0 0\n0 1 0\n")
        pc = load_cloud(path)
        assert pc.points.shape == (3, 3)
        np.testing.assert_allclose(pc.points, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])

    def test_bad_token_names_line(self, tmp_path):
        path = tmp_path / "bad.xyz"
        path.write_text("0 0 0\n1 oops 0\n")
        with pytest.raises(ParseError, match="line 2"):
            load_cloud(path)

    def test_short_row_names_line(self, tmp_path):
        path = tmp_path / "short.xyz"
        path.write_text("0 0\n")
        with pytest.raises(ParseError, match="line 1"):
            load_cloud(path)

    def test_non_finite_rejected(self, tmp_path):
        path = tmp_path / "inf.xyz"
        path.write_text("0 0 inf\n")
        with pytest.raises(ParseError, match="non-finite"):
            load_cloud(path)


class TestPly:
    def test_empty_cloud(self, tmp_path):
        path = tmp_path / "empty.ply"
        path.write_text("ply\nformat ascii 1.0\nelement vertex 0\n"
                        "property float x\nproperty float y\nproperty float z\n"
                        "end_header\n")
        with pytest.raises(ParseError, match="empty cloud"):
            load_cloud(path)

    def test_ascii_with_extra_attributes(self, tmp_path):
        path = tmp_path / "attrs.ply"
        path.write_text("ply\nformat ascii 1.0\nelement vertex 2\n"
                        "property float x\nproperty float y\nproperty float z\n"
                        "property uchar red\nend_header\n"
                        "1 2 3 255\n4 5 6 0\n")
        pc = load_cloud(path)
        np.testing.assert_allclose(pc.points, [[1, 2, 3], [4, 5, 6]])

    def test_binary_short_payload_names_offset(self, tmp_path, rng):
        pc = PointCloud(rng.uniform(size=(10, 3)))
        path = tmp_path / "trunc.ply"
        save_cloud(path, pc)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(ParseError, match="offset"):
            load_cloud(path)

    def test_binary_interleaved_attributes(self, tmp_path):
        header = ("ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
                  "property float x\nproperty float y\nproperty float z\n"
                  "property float intensity\nend_header\n").encode()
        body = np.array([[1, 2, 3, 9], [4, 5, 6, 9]], dtype="<f4").tobytes()
        path = tmp_path / "inter.ply"
        path.write_bytes(header + body)
        pc = load_cloud(path)
        np.testing.assert_allclose(pc.points, [[1, 2, 3], [4, 5, 6]])

    @pytest.mark.parametrize("fmt", ["ply-binary", "ply-ascii", "xyz"])
    def test_round_trip(self, tmp_path, rng, fmt):
        pts = rng.uniform(-1, 1, size=(64, 3))
        path = tmp_path / f"rt.{ 'xyz' if fmt == 'xyz' else 'ply' }"
        save_cloud(path, PointCloud(pts), fmt)
        back = load_cloud(path)
        np.testing.assert_allclose(back.points, pts, atol=1e-6)

    def test_not_a_ply(self, tmp_path):
        path = tmp_path / "bogus.ply"
        path.write_text("hello\n")
        with pytest.raises(ParseError, match="header"):
            load_cloud(path)


class TestFlowDump:
    def test_columns(self, tmp_path, rng):
        pts = rng.uniform(size=(5, 3))
        flow = rng.uniform(size=(5, 3))
        path = tmp_path / "flow.xyz"
        save_flow(path, pts, flow)
        rows = np.loadtxt(path)
        np.testing.assert_allclose(rows[:, :3], pts, atol=1e-8)
        np.testing.assert_allclose(rows[:, 3:], flow, atol=1e-8)


class TestSamplePoints:
    def test_n_equal_is_permutation(self, rng):
        pts = rng.uniform(size=(20, 3))
        out = sample_points(PointCloud(pts), 20, seed=3)
        assert sorted(map(tuple, out.points)) == sorted(map(tuple, pts))

    def test_deterministic(self, rng):
        pc = PointCloud(rng.uniform(size=(50000, 3)))
        a = sample_points(pc, 1024, seed=11)
        b = sample_points(pc, 1024, seed=11)
        np.testing.assert_array_equal(a.points, b.points)

    def test_undersized_upsamples(self, rng):
        pc = PointCloud(rng.uniform(size=(10, 3)))
        out = sample_points(pc, 25, seed=0)
        assert len(out) == 25
        # every output point exists in the input
        assert {tuple(p) for p in out.points} <= {tuple(p) for p in pc.points}

    def test_subsample_mean_unbiased(self, rng):
        pc = PointCloud(rng.uniform(size=(20000, 3)))
        full_mean = pc.points.mean(axis=0)
        per_point_var = pc.points.var(axis=0)
        sigma = np.sqrt(per_point_var / 1024)
        means = np.array([sample_points(pc, 1024, seed=s).points.mean(axis=0)
                          for s in range(100)])
        # each coordinate of each subsample mean within 3 sigma (a few
        # excursions are statistically allowed; bound the failure count)
        violations = (np.abs(means - full_mean) > 3 * sigma).sum()
        assert violations <= 5


class TestRemoveOutliers:
    def test_planted_outlier(self, rng):
        cluster = rng.normal(0, 0.05, size=(100, 3))
        pts = np.concatenate([cluster, [[50.0, 0, 0]]])
        out = remove_outliers(PointCloud(pts), k=8, std_ratio=2.0)
        assert len(out) == 100
        assert not any(np.allclose(p, [50, 0, 0]) for p in out.points)

    def test_uniform_grid_untouched(self):
        g = np.linspace(0, 1, 5)
        pts = np.array(np.meshgrid(g, g, g)).reshape(3, -1).T
        out = remove_outliers(PointCloud(pts), k=8, std_ratio=10.0)
        assert len(out) == len(pts)

    def test_idempotent_on_clean_data(self, rng):
        pts = rng.uniform(size=(200, 3))
        once = remove_outliers(PointCloud(pts), k=8, std_ratio=6.0)
        twice = remove_outliers(once, k=8, std_ratio=6.0)
        np.testing.assert_array_equal(once.points, twice.points)

    def test_order_preserved(self, rng):
        pts = rng.uniform(size=(50, 3))
        out = remove_outliers(PointCloud(pts), k=4, std_ratio=8.0)
        # nothing removed at this ratio, so order must match exactly
        np.testing.assert_array_equal(out.points, pts)

    def test_k_too_large(self, rng):
        with pytest.raises(ValueError):
            remove_outliers(PointCloud(rng.uniform(size=(10, 3))), k=10)

    def test_never_removes_majority(self, rng):
        for seed in range(5):
            r = np.random.default_rng(seed)
            pts = np.concatenate([r.normal(0, 0.1, size=(80, 3)),
                                  r.uniform(-5, 5, size=(20, 3))])
            out = remove_outliers(PointCloud(pts), k=8, std_ratio=2.0)
            assert len(out) >= 50


class TestNormalizeTimestamps:
    def test_affine_map(self):
        seq = Sequence([PointCloud(np.zeros((1, 3)) + i, t)
                        for i, t in enumerate([10.0, 13.0, 16.0, 19.0])])
        out = normalize_timestamps(seq)
        np.testing.assert_allclose(out.timestamps, [0, 1 / 3, 2 / 3, 1])

    def test_identity_when_normalized(self):
        seq = Sequence([PointCloud(np.zeros((1, 3)), 0.0),
                        PointCloud(np.ones((1, 3)), 1.0)])
        np.testing.assert_allclose(normalize_timestamps(seq).timestamps, [0, 1])

    def test_scaled_spacing(self):
        seq = Sequence([PointCloud(np.zeros((1, 3)) + i, t)
                        for i, t in enumerate([0.0, 4.0, 8.0, 12.0])])
        np.testing.assert_allclose(normalize_timestamps(seq).timestamps,
                                   [0, 1 / 3, 2 / 3, 1])

    def test_relative_spacing_preserved(self, rng):
        raw = np.sort(rng.uniform(0, 100, size=5))
        raw += np.arange(5) * 1e-3  # ensure strict increase
        seq = Sequence([PointCloud(np.zeros((1, 3)), t) for t in raw])
        out = normalize_timestamps(seq).timestamps
        orig_ratios = np.diff(raw) / (raw[-1] - raw[0])
        np.testing.assert_allclose(np.diff(out), orig_ratios, rtol=1e-9)

    def test_duplicate_rejected(self):
        with pytest.raises(ValueError):
            Sequence([PointCloud(np.zeros((1, 3)), 1.0),
                      PointCloud(np.zeros((1, 3)), 1.0)])
