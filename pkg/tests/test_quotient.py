import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deblurnet.errors import DimensionError, ShapeError
from deblurnet.gradcheck import numeric_gradient, numeric_scalar, relative_error
from deblurnet.imaging import convolve_circular, identity_kernel, kernel_from_origin
from deblurnet.quotient import (DEFAULT_BETA_K, image_estimate_backward, image_estimate_forward,
                                image_estimate_gradient_prior, kernel_estimate_backward,
                                kernel_estimate_forward)
from deblurnet.synth import TrajectoryConfig, sample_kernel


def small_kernel(rng, K=5):
    return sample_kernel(TrajectoryConfig(kernel_size=K, num_samples=64), rng)


class TestKernelEstimateForward:
    def test_default_beta(self):
        assert DEFAULT_BETA_K == 1e-4

    def test_exact_recovery(self, rng):
        k = small_kernel(rng, 7)
        x = rng.standard_normal((32, 32))
        raw, _ = kernel_estimate_forward(x, convolve_circular(x, k), 1e-12)
        np.testing.assert_allclose(kernel_from_origin(raw, 7), k, atol=1e-9)

    def test_zero_numerator_gives_zero_kernel(self, rng):
        raw, _ = kernel_estimate_forward(rng.standard_normal((2, 8, 8)), np.zeros((2, 8, 8)))
        np.testing.assert_array_equal(raw, 0.0)

    def test_denominator_positive(self, rng):
        _, tape = kernel_estimate_forward(np.zeros((1, 6, 6)), np.zeros((1, 6, 6)), 1e-4)
        assert tape.den.min() >= 1e-4

    def test_output_is_real_of_input_shape(self, rng):
        raw, _ = kernel_estimate_forward(rng.standard_normal((3, 9, 11)),
                                         rng.standard_normal((3, 9, 11)))
        assert raw.shape == (9, 11) and raw.dtype == np.float64

    def test_mismatched_shapes(self, rng):
        with pytest.raises(ShapeError):
            kernel_estimate_forward(rng.random((2, 8, 8)), rng.random((1, 8, 8)))

    def test_nonpositive_beta(self, rng):
        with pytest.raises(ValueError):
            kernel_estimate_forward(rng.random((8, 8)), rng.random((8, 8)), 0.0)


class TestKernelEstimateBackward:
    def test_finite_differences(self, rng):
        x = rng.standard_normal((2, 12, 12))
        y = rng.standard_normal((2, 12, 12))
        w = rng.standard_normal((12, 12))
        beta = 0.3

        def loss():
            return float(np.sum(kernel_estimate_forward(x, y, beta)[0] * w))

        _, tape = kernel_estimate_forward(x, y, beta)
        dx, dy, db = kernel_estimate_backward(tape, w)
        assert relative_error(dx, numeric_gradient(loss, x)) < 1e-6
        assert relative_error(dy, numeric_gradient(loss, y)) < 1e-6
        nb = numeric_scalar(lambda b: float(np.sum(kernel_estimate_forward(x, y, b)[0] * w)), beta)
        assert relative_error(db, nb) < 1e-6

    def test_zero_delta(self, rng):
        _, tape = kernel_estimate_forward(rng.random((2, 8, 8)), rng.random((2, 8, 8)))
        dx, dy, db = kernel_estimate_backward(tape, np.zeros((8, 8)))
        assert not dx.any() and not dy.any() and db == 0.0

    def test_beta_gradient_negative_when_aligned(self, rng):
        # one impulse feature: output shrinks as beta grows
        x = np.zeros((1, 8, 8))
        x[0, 0, 0] = 1.0
        y = rng.random((1, 8, 8))
        out, tape = kernel_estimate_forward(x, y, 5.0)
        _, _, db = kernel_estimate_backward(tape, out)
        assert db < 0

    def test_shape_mismatch(self, rng):
        _, tape = kernel_estimate_forward(rng.random((8, 8)), rng.random((8, 8)))
        with pytest.raises(ShapeError):
            kernel_estimate_backward(tape, np.zeros((7, 8)))


class TestImageEstimate:
    def test_identity_kernel_returns_input(self, rng):
        y = rng.random((10, 12))
        x, _ = image_estimate_forward(identity_kernel(3), y, 1e-12)
        np.testing.assert_allclose(x, y, atol=1e-8)

    def test_exact_inversion(self, rng):
        k = np.array([[0.0, 0.1, 0.0], [0.1, 0.6, 0.1], [0.0, 0.1, 0.0]])  # OTF >= 0.2
        x = rng.random((16, 16))
        est, _ = image_estimate_forward(k, convolve_circular(x, k), 1e-12)
        np.testing.assert_allclose(est, x, atol=1e-6)

    def test_strong_shrinkage(self, rng):
        y = rng.random((12, 12))
        x, _ = image_estimate_forward(small_kernel(rng), y, 1e3)
        assert np.linalg.norm(x) < 1e-2 * np.linalg.norm(y)

    def test_kernel_larger_than_image(self):
        with pytest.raises(DimensionError):
            image_estimate_forward(np.ones((7, 7)) / 49, np.ones((5, 5)), 0.1)

    def test_finite_differences(self, rng):
        k = small_kernel(rng)
        y = rng.standard_normal((12, 12))
        w = rng.standard_normal((12, 12))
        beta = 0.05

        def loss():
            return float(np.sum(image_estimate_forward(k, y, beta)[0] * w))

        _, tape = image_estimate_forward(k, y, beta)
        dk, dy, db = image_estimate_backward(tape, w)
        assert dk.shape == (5, 5)
        assert relative_error(dk, numeric_gradient(loss, k)) < 1e-6
        assert relative_error(dy, numeric_gradient(loss, y)) < 1e-6
        nb = numeric_scalar(lambda b: float(np.sum(image_estimate_forward(k, y, b)[0] * w)), beta)
        assert relative_error(db, nb) < 1e-6

    def test_zero_delta(self, rng):
        _, tape = image_estimate_forward(small_kernel(rng), rng.random((9, 9)), 0.1)
        dk, dy, db = image_estimate_backward(tape, np.zeros((9, 9)))
        assert not dk.any() and not dy.any() and db == 0.0

    def test_identity_adjoint(self, rng):
        _, tape = image_estimate_forward(identity_kernel(3), rng.random((8, 8)), 1e-12)
        delta = rng.standard_normal((8, 8))
        np.testing.assert_allclose(image_estimate_backward(tape, delta)[1], delta, atol=1e-8)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 10.0))
    def test_output_is_real_and_finite(self, seed, beta):
        r = np.random.default_rng(seed)
        x, _ = image_estimate_forward(small_kernel(r), r.random((10, 10)), beta)
        assert np.all(np.isfinite(x))


class TestGradientPrior:
    def test_identity_kernel_small_beta(self, rng):
        y = rng.random((14, 10))
        np.testing.assert_allclose(image_estimate_gradient_prior(identity_kernel(3), y, 1e-10), y,
                                   atol=1e-7)

    def test_preserves_mean(self, rng):
        k = small_kernel(rng)
        y = convolve_circular(rng.random((16, 16)), k)
        assert image_estimate_gradient_prior(k, y, 10.0).mean() == pytest.approx(y.mean())

    def test_large_beta_flattens(self, rng):
        y = rng.random((16, 16))
        out = image_estimate_gradient_prior(small_kernel(rng), y, 1e6)
        assert out.std() < 1e-3 * y.std()

    def test_beats_blurry_with_true_kernel(self, rng):
        from deblurnet.synth import procedural_scene
        x = procedural_scene((64, 64), rng)
        k = small_kernel(rng, 9)
        y = convolve_circular(x, k) + rng.normal(0, 0.01, x.shape)
        out = image_estimate_gradient_prior(k, y, 0.02)
        assert np.mean((out - x) ** 2) < np.mean((y - x) ** 2)

    def test_nonpositive_beta(self, rng):
        with pytest.raises(ValueError):
            image_estimate_gradient_prior(identity_kernel(3), rng.random((5, 5)), 0.0)
