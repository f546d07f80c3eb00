import numpy as np
import pytest

from deblurnet.gradcheck import (format_table, numeric_gradient, numeric_scalar, relative_error,
                                  run_gradcheck)


class TestHelpers:
    def test_numeric_gradient_of_quadratic(self, rng):
        x = rng.standard_normal(6)
        g = numeric_gradient(lambda: float(np.sum(x ** 3)), x)
        np.testing.assert_allclose(g, 3 * x ** 2, rtol=1e-9)

    def test_input_restored(self, rng):
        x = rng.standard_normal(4)
        before = x.copy()
        numeric_gradient(lambda: float(np.sum(x)), x)
        np.testing.assert_array_equal(x, before)

    def test_kink_marked_nan(self):
        x = np.array([0.0, 1.0])
        g = numeric_gradient(lambda: float(np.abs(x).sum()), x,
                             signature=lambda: tuple(x > 0))
        assert np.isnan(g[0]) and g[1] == pytest.approx(1.0)

    def test_numeric_scalar(self):
        assert numeric_scalar(lambda b: b ** 2, 0.5) == pytest.approx(1.0)

    def test_relative_error(self):
        assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert relative_error([1.01], [1.0]) == pytest.approx(0.01 / 1.01)
        assert relative_error([1e-12], [0.0]) == 0.0          # below the floor
        assert relative_error([5.0, np.nan], [5.0, np.nan]) == 0.0


class TestSuite:
    def test_all_layers_pass(self):
        res = run_gradcheck(seed=1, instances=2)
        layers = {r.layer for r in res}
        assert {"kernel_quotient.x_tilde", "kernel_quotient.y_tilde", "kernel_quotient.beta_k",
                "image_quotient.kernel", "image_quotient.y", "image_quotient.beta_x",
                "scale.params"} <= layers
        assert all(r.passed for r in res), format_table(res)

    def test_corruption_detected_by_layer(self):
        res = run_gradcheck(seed=1, instances=1, checks=["kernel_quotient"],
                            corrupt={"kernel_quotient.x_tilde"})
        failed = [r.layer for r in res if not r.passed]
        assert failed == ["kernel_quotient.x_tilde"]
        assert "FAIL" in format_table(res)
