"""Positional encoding and the coordinate MLP."""

import numpy as np
import pytest

import cloud4d.autodiff as ad
from cloud4d.field import ENC_DIM, NeuralFieldParams, field_forward, posenc
from cloud4d.gradcheck import check_gradients


@pytest.fixture
def rng():
    return np.random.default_rng(9)


@pytest.fixture
def small_params(rng):
    # narrow input layer keeps the exhaustive gradient probe quick
    return NeuralFieldParams.create(rng, input_width=8, hidden_width=6,
                                    hidden_depth=2)


class TestPosenc:
    def test_origin(self):
        out = posenc(np.zeros((1, 3)), 0.0)
        np.testing.assert_allclose(out[0], [0, 0, 1, 0, 0, 1, 0, 0, 1, 0, 0, 1])

    def test_half_pi(self):
        out = posenc(np.array([[np.pi / 2, 0.0, 0.0]]), 0.0)
        np.testing.assert_allclose(out[0, :3], [np.pi / 2, 1.0, 0.0], atol=1e-12)

    @pytest.mark.parametrize("n", [1, 7, 50])
    def test_shape(self, n, rng):
        assert posenc(rng.uniform(size=(n, 3)), 0.3).shape == (n, ENC_DIM)

    def test_raw_coordinate_columns(self, rng):
        pts = rng.uniform(-3, 3, size=(20, 3))
        out = posenc(pts, 0.7)
        np.testing.assert_array_equal(out[:, [0, 3, 6]], pts)
        np.testing.assert_allclose(out[:, 9], 0.7)

    def test_sin_cos_identity(self, rng):
        out = posenc(rng.uniform(-9, 9, size=(30, 3)), 2.5)
        for base in (1, 4, 7, 10):
            s, c = out[:, base], out[:, base + 1]
            np.testing.assert_allclose(s * s + c * c, 1.0, atol=1e-9)

    def test_non_finite_time(self):
        with pytest.raises(ValueError):
            posenc(np.zeros((1, 3)), np.nan)


class TestFieldForward:
    def test_zero_weights_zero_output(self, small_params, rng):
        for w, b in small_params.layers:
            w.data = np.zeros_like(w.data)
            b.data = np.zeros_like(b.data)
        out = field_forward(posenc(rng.uniform(size=(4, 3)), 0.2), small_params)
        np.testing.assert_array_equal(out.data, np.zeros((4, 32)))

    def test_pointwise_rows(self, small_params, rng):
        enc = posenc(np.tile(rng.uniform(size=(1, 3)), (2, 1)), 0.5)
        out = field_forward(enc, small_params)
        np.testing.assert_array_equal(out.data[0], out.data[1])

    def test_permutation_equivariance(self, small_params, rng):
        pts = rng.uniform(size=(10, 3))
        perm = rng.permutation(10)
        a = field_forward(posenc(pts, 0.1), small_params)
        b = field_forward(posenc(pts[perm], 0.1), small_params)
        np.testing.assert_allclose(a.data[perm], b.data, atol=1e-12)

    def test_depends_on_time(self, small_params, rng):
        pts = rng.uniform(size=(6, 3))
        a = field_forward(posenc(pts, 0.0), small_params)
        b = field_forward(posenc(pts, 0.9), small_params)
        assert np.abs(a.data - b.data).max() > 1e-6

    def test_default_dimensions(self, rng):
        params = NeuralFieldParams.create(rng)
        dims = [(w.shape, b.shape) for w, b in params.layers]
        assert dims[0] == ((12, 1280), (1280,))
        assert dims[1] == ((1280, 32), (32,))
        assert len(params.layers) == 1 + 5 + 5 + 1
        assert dims[-1] == ((32, 32), (32,))

    def test_gradients(self, small_params, rng):
        enc = posenc(rng.uniform(size=(5, 3)), 0.4)
        probe = ad.constant(rng.standard_normal((5, 32)))
        report = check_gradients(
            lambda: ad.tsum(field_forward(enc, small_params) * probe),
            small_params.tensors(), samples=40,
            rng=np.random.default_rng(1))
        assert report.max_rel_err < 1e-4

    def test_gradient_wrt_input(self, rng, small_params):
        enc_data = posenc(rng.uniform(size=(3, 3)), 0.4)
        enc = ad.parameter(enc_data)
        report = check_gradients(
            lambda: ad.tsum(field_forward(enc, small_params) ** 2.0), [enc])
        assert report.max_rel_err < 1e-4
